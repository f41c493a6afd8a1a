use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::Point3;

/// End-effector pose: translation (m), axis-angle rotation (rad), gripper.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Pose7DoF {
    pub translation: Point3,
    pub rotation: Point3,
    /// `{0, 1}` as a label, `[0, 1]` as a prediction.
    pub gripper: f64,
}

impl Pose7DoF {
    pub fn new(translation: Point3, rotation: Point3, gripper: f64) -> Self {
        Self { translation, rotation, gripper }
    }

    pub fn to_array(&self) -> [f64; 7] {
        let (t, r) = (self.translation, self.rotation);
        [t[0], t[1], t[2], r[0], r[1], r[2], self.gripper]
    }

    pub fn from_slice(v: &[f64]) -> Self {
        Self { translation: [v[0], v[1], v[2]], rotation: [v[3], v[4], v[5]], gripper: v[6] }
    }

    pub fn is_finite(&self) -> bool {
        self.to_array().iter().all(|x| x.is_finite())
    }

    pub fn validate(&self) -> Result<()> {
        if !self.is_finite() {
            return Err(Error::NonFinite(format!("pose {:?}", self.to_array())));
        }
        Ok(())
    }
}

/// Wraps an axis-angle vector so that its norm is at most π.
pub fn canonicalize_axis_angle(r: Point3) -> Point3 {
    use std::f64::consts::PI;
    let n = (r[0] * r[0] + r[1] * r[1] + r[2] * r[2]).sqrt();
    if n <= PI || n == 0.0 {
        return r;
    }
    let axis = [r[0] / n, r[1] / n, r[2] / n];
    let mut a = n % (2.0 * PI);
    if a > PI {
        a -= 2.0 * PI;
    }
    axis.map(|x| x * a)
}

/// End-effector pose plus joint positions and velocities.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RobotState {
    pub ee: Pose7DoF,
    pub joint_positions: Vec<f64>,
    pub joint_velocities: Vec<f64>,
}

impl RobotState {
    /// `[ee (7) ∥ joint positions ∥ joint velocities]`
    pub fn to_vec(&self) -> Vec<f64> {
        let mut v = self.ee.to_array().to_vec();
        v.extend_from_slice(&self.joint_positions);
        v.extend_from_slice(&self.joint_velocities);
        v
    }

    pub fn from_slice(v: &[f64], joints: usize) -> Result<Self> {
        if v.len() != 7 + 2 * joints {
            return Err(Error::Shape(format!("state of {} values for {joints} joints", v.len())));
        }
        Ok(Self {
            ee: Pose7DoF::from_slice(&v[..7]),
            joint_positions: v[7..7 + joints].to_vec(),
            joint_velocities: v[7 + joints..].to_vec(),
        })
    }

    pub fn dim(&self) -> usize {
        7 + self.joint_positions.len() + self.joint_velocities.len()
    }
}
