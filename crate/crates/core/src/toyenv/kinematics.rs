//! Planar finger chains on a free-floating wrist.
//!
//! Wrist frame: +x points along the fingers, +y is lateral, +z is the back of
//! the hand. Every finger joint flexes about the wrist-frame y axis, curling
//! the chain toward -z. Link nodes sit at the distal end of their link, so the
//! last link's node is the fingertip; the palm node sits at the wrist origin.

use nalgebra::{Quaternion, UnitQuaternion, Vector3};
use serde::{Deserialize, Serialize};

use crate::kingraph::{GeometrySpec, Hand, HandSpec};

pub type Vec3 = [f64; 3];
/// `(w, x, y, z)`
pub type Quat = [f64; 4];

pub const IDENTITY: Quat = [1.0, 0.0, 0.0, 0.0];

pub fn v3(a: Vec3) -> Vector3<f64> {
    Vector3::new(a[0], a[1], a[2])
}

pub fn arr3(v: &Vector3<f64>) -> Vec3 {
    [v.x, v.y, v.z]
}

pub fn uq(q: Quat) -> UnitQuaternion<f64> {
    UnitQuaternion::from_quaternion(Quaternion::new(q[0], q[1], q[2], q[3]))
}

/// Canonical form with `w >= 0`.
pub fn arr4(q: &UnitQuaternion<f64>) -> Quat {
    let c = q.quaternion().coords;
    let s = if c.w < 0.0 { -1.0 } else { 1.0 };
    [s * c.w, s * c.x, s * c.y, s * c.z]
}

pub fn dist(a: Vec3, b: Vec3) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
}

pub fn sub(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

/// Rest geometry of one hand.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HandGeometry {
    pub side: Hand,
    pub fingers: usize,
    pub links: usize,
    pub palm_length: f64,
    pub finger_spacing: f64,
    pub link_length: f64,
}

impl HandGeometry {
    pub fn new(spec: &HandSpec, geometry: &GeometrySpec) -> Self {
        Self {
            side: spec.side,
            fingers: spec.fingers as usize,
            links: spec.links_per_finger as usize,
            palm_length: geometry.palm_length,
            finger_spacing: geometry.finger_spacing,
            link_length: geometry.link_length,
        }
    }

    pub fn n_joints(&self) -> usize {
        self.fingers * self.links
    }

    /// Base of finger `f` in the wrist frame.
    pub fn finger_base(&self, f: usize) -> Vector3<f64> {
        let lateral = (f as f64 - (self.fingers as f64 - 1.0) / 2.0) * self.finger_spacing;
        Vector3::new(self.palm_length, lateral, 0.0)
    }

    /// Wrist-frame node positions and flexion angles: palm first, then
    /// finger-major links. `joints` is finger-major as well.
    pub fn local_fk(&self, joints: &[f64]) -> Vec<(Vector3<f64>, f64)> {
        let mut out = Vec::with_capacity(1 + self.n_joints());
        out.push((Vector3::zeros(), 0.0));
        for f in 0..self.fingers {
            let mut p = self.finger_base(f);
            let mut phi = 0.0;
            for l in 0..self.links {
                phi += joints[f * self.links + l];
                p += self.link_length * Vector3::new(phi.cos(), 0.0, -phi.sin());
                out.push((p, phi));
            }
        }
        out
    }

    /// World-frame node poses, same order as [`HandGeometry::local_fk`].
    pub fn fk(&self, wrist_pos: Vec3, wrist_rot: Quat, joints: &[f64]) -> Vec<(Vec3, Quat)> {
        let r = uq(wrist_rot);
        let w = v3(wrist_pos);
        self.local_fk(joints)
            .into_iter()
            .map(|(p, phi)| {
                let q = r * UnitQuaternion::from_axis_angle(&Vector3::y_axis(), phi);
                (arr3(&(w + r * p)), arr4(&q))
            })
            .collect()
    }

    /// Wrist-frame fingertip positions.
    pub fn local_tips(&self, joints: &[f64]) -> Vec<Vector3<f64>> {
        let fk = self.local_fk(joints);
        (0..self.fingers).map(|f| fk[1 + f * self.links + self.links - 1].0).collect()
    }
}

/// Pose of `child` expressed in the frame of `parent`.
pub fn relative_pose(parent: (Vec3, Quat), child: (Vec3, Quat)) -> (Vec3, Quat) {
    let pr = uq(parent.1);
    let inv = pr.inverse();
    (arr3(&(inv * (v3(child.0) - v3(parent.0)))), arr4(&(inv * uq(child.1))))
}

/// Inverse of [`relative_pose`].
pub fn compose_pose(parent: (Vec3, Quat), rel: (Vec3, Quat)) -> (Vec3, Quat) {
    let pr = uq(parent.1);
    (arr3(&(v3(parent.0) + pr * v3(rel.0))), arr4(&(pr * uq(rel.1))))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn geom(f: usize, l: usize) -> HandGeometry {
        HandGeometry {
            side: Hand::Right,
            fingers: f,
            links: l,
            palm_length: 0.04,
            finger_spacing: 0.02,
            link_length: 0.025,
        }
    }

    #[test]
    fn straight_finger_extends_along_x() {
        let g = geom(1, 3);
        let fk = g.fk([0.0; 3], IDENTITY, &[0.0; 3]);
        assert_eq!(fk.len(), 4);
        let tip = fk[3].0;
        assert!((tip[0] - (0.04 + 0.075)).abs() < 1e-15);
        assert!(tip[1].abs() < 1e-15 && tip[2].abs() < 1e-15);
    }

    #[test]
    fn right_angle_flex_points_down() {
        let g = geom(1, 1);
        let fk = g.fk([0.0; 3], IDENTITY, &[std::f64::consts::FRAC_PI_2]);
        let tip = fk[1].0;
        assert!((tip[0] - 0.04).abs() < 1e-12);
        assert!((tip[2] + 0.025).abs() < 1e-12);
    }

    #[test]
    fn link_lengths_are_preserved_under_any_pose() {
        let g = geom(3, 3);
        let rot = arr4(&UnitQuaternion::from_euler_angles(0.3, -0.7, 1.1));
        let joints: Vec<f64> = (0..9).map(|i| 0.1 * i as f64 - 0.2).collect();
        let fk = g.fk([0.1, -0.2, 0.3], rot, &joints);
        for f in 0..3 {
            for l in 1..3 {
                let a = fk[1 + f * 3 + l - 1].0;
                let b = fk[1 + f * 3 + l].0;
                assert!((dist(a, b) - 0.025).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn relative_pose_round_trip() {
        let parent = ([0.1, 0.2, -0.3], arr4(&UnitQuaternion::from_euler_angles(0.2, 0.4, -0.1)));
        let child = ([0.3, -0.1, 0.0], arr4(&UnitQuaternion::from_euler_angles(-0.5, 0.1, 0.9)));
        let rel = relative_pose(parent, child);
        let back = compose_pose(parent, rel);
        assert!(dist(back.0, child.0) < 1e-14);
        for i in 0..4 {
            assert!((back.1[i] - child.1[i]).abs() < 1e-14);
        }
    }
}
