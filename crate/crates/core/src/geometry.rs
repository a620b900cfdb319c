//! Mechanism description and the configuration/task-space state types.
//!
//! Units inside the crate are mm, rad, N and N·m. The JSON form of
//! [`DeltaGeometry`] uses degrees for angles so that hand-edited config
//! files stay readable.

use std::f64::consts::PI;

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Servo stall torque of the micro servos (0.2 kg·cm) in N·m.
pub const DEFAULT_TORQUE_LIMIT_NM: f64 = 0.0196;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("{0} must be positive, got {1}")]
    NonPositive(&'static str, f64),
    #[error("rod length {rod} mm must exceed upper arm length {arm} mm")]
    RodTooShort { rod: f64, arm: f64 },
    #[error("arm azimuths must be 120 deg apart, got {0:?} deg")]
    Azimuths([f64; 3]),
    #[error("joint {0} limits are empty or not finite")]
    JointLimits(usize),
    #[error("workspace: {0}")]
    Workspace(String),
}

/// End-effector position in the device frame.
///
/// Origin at the base-plate centre, +z toward the finger pad, +y toward the
/// fingertip.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Pose {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Pose {
    pub const fn new(x: f64, y: f64, z: f64) -> Self {
        Self { x, y, z }
    }

    pub fn to_vector(self) -> Vector3<f64> {
        Vector3::new(self.x, self.y, self.z)
    }

    pub fn from_vector(v: &Vector3<f64>) -> Self {
        Self::new(v.x, v.y, v.z)
    }

    pub fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.z.is_finite()
    }

    pub fn distance(&self, other: &Pose) -> f64 {
        (self.to_vector() - other.to_vector()).norm()
    }

    pub fn radial(&self) -> f64 {
        self.x.hypot(self.y)
    }

    /// Rotate about the device z axis.
    pub fn rotated_z(&self, angle: f64) -> Pose {
        let (s, c) = angle.sin_cos();
        Pose::new(c * self.x - s * self.y, s * self.x + c * self.y, self.z)
    }

    pub fn lerp(&self, other: &Pose, u: f64) -> Pose {
        Pose::new(
            self.x + (other.x - self.x) * u,
            self.y + (other.y - self.y) * u,
            self.z + (other.z - self.z) * u,
        )
    }

    pub fn with_z(&self, z: f64) -> Pose {
        Pose::new(self.x, self.y, z)
    }
}

/// Servo shaft angles in radians, measured from the base plane.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct JointAngles {
    pub theta: [f64; 3],
}

impl JointAngles {
    pub const fn new(theta: [f64; 3]) -> Self {
        Self { theta }
    }

    pub fn uniform(theta: f64) -> Self {
        Self::new([theta; 3])
    }

    pub fn to_degrees(&self) -> [f64; 3] {
        self.theta.map(f64::to_degrees)
    }

    pub fn max_abs_diff(&self, other: &JointAngles) -> f64 {
        self.theta
            .iter()
            .zip(other.theta.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

/// Force the tactor exerts on the pad, in N.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ForceVector {
    pub fx: f64,
    pub fy: f64,
    pub fz: f64,
}

impl ForceVector {
    pub const ZERO: ForceVector = ForceVector::new(0.0, 0.0, 0.0);

    pub const fn new(fx: f64, fy: f64, fz: f64) -> Self {
        Self { fx, fy, fz }
    }

    pub const fn normal(fz: f64) -> Self {
        Self::new(0.0, 0.0, fz)
    }

    pub fn to_vector(self) -> Vector3<f64> {
        Vector3::new(self.fx, self.fy, self.fz)
    }

    pub fn from_vector(v: &Vector3<f64>) -> Self {
        Self::new(v.x, v.y, v.z)
    }

    pub fn magnitude(&self) -> f64 {
        self.to_vector().norm()
    }
}

/// Servo shaft torques in N·m.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct TorqueTriple {
    pub torques: [f64; 3],
}

impl TorqueTriple {
    pub fn max_abs(&self) -> f64 {
        self.torques.iter().fold(0.0, |m, t| m.max(t.abs()))
    }
}

/// The 3-DoF inverted Delta mechanism.
///
/// Arm `i` has its servo shaft on a circle of `base_joint_radius` at
/// `arm_azimuths[i]`; the upper arm swings in the vertical plane through the
/// device axis and the rod joins the elbow to the platform joint at
/// `platform_joint_radius` from the tactor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(into = "GeometryFile", try_from = "GeometryFile")]
pub struct DeltaGeometry {
    pub base_joint_radius: f64,
    pub platform_joint_radius: f64,
    pub upper_arm_length: f64,
    pub rod_length: f64,
    /// Radians.
    pub arm_azimuths: [f64; 3],
    /// Radians, `[min, max]` per servo.
    pub joint_angle_limits: [[f64; 2]; 3],
    pub inverted: bool,
    /// Per-servo torque limit in N·m.
    pub torque_limit: f64,
}

impl Default for DeltaGeometry {
    fn default() -> Self {
        Self {
            base_joint_radius: 18.0,
            platform_joint_radius: 6.0,
            upper_arm_length: 15.0,
            rod_length: 30.0,
            arm_azimuths: [0.0, 120.0_f64.to_radians(), 240.0_f64.to_radians()],
            joint_angle_limits: [[(-30.0_f64).to_radians(), 88.0_f64.to_radians()]; 3],
            inverted: true,
            torque_limit: DEFAULT_TORQUE_LIMIT_NM,
        }
    }
}

impl DeltaGeometry {
    pub fn validate(&self) -> Result<(), GeometryError> {
        for (name, v) in [
            ("base_joint_radius", self.base_joint_radius),
            ("platform_joint_radius", self.platform_joint_radius),
            ("upper_arm_length", self.upper_arm_length),
            ("rod_length", self.rod_length),
            ("torque_limit", self.torque_limit),
        ] {
            if !(v > 0.0) || !v.is_finite() {
                return Err(GeometryError::NonPositive(name, v));
            }
        }
        if self.rod_length <= self.upper_arm_length {
            return Err(GeometryError::RodTooShort {
                rod: self.rod_length,
                arm: self.upper_arm_length,
            });
        }
        for k in 0..3 {
            let next = self.arm_azimuths[(k + 1) % 3];
            let gap = (next - self.arm_azimuths[k]).rem_euclid(2.0 * PI);
            if (gap - 2.0 * PI / 3.0).abs() > 1e-9 {
                return Err(GeometryError::Azimuths(self.arm_azimuths.map(f64::to_degrees)));
            }
        }
        for (k, [lo, hi]) in self.joint_angle_limits.iter().enumerate() {
            if !(lo < hi) || !lo.is_finite() || !hi.is_finite() {
                return Err(GeometryError::JointLimits(k));
            }
        }
        Ok(())
    }

    /// Radial offset between the shaft circle and the platform joint circle.
    pub fn effective_radius(&self) -> f64 {
        self.base_joint_radius - self.platform_joint_radius
    }

    /// Unit vector from the device axis toward arm `i`.
    pub fn radial_axis(&self, i: usize) -> Vector3<f64> {
        let (s, c) = self.arm_azimuths[i].sin_cos();
        Vector3::new(c, s, 0.0)
    }

    /// Unit vector in the base plane perpendicular to arm `i`'s plane.
    pub fn tangent_axis(&self, i: usize) -> Vector3<f64> {
        let (s, c) = self.arm_azimuths[i].sin_cos();
        Vector3::new(-s, c, 0.0)
    }

    pub fn within_limits(&self, i: usize, theta: f64) -> bool {
        let [lo, hi] = self.joint_angle_limits[i];
        theta >= lo && theta <= hi
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct GeometryFile {
    base_joint_radius: f64,
    platform_joint_radius: f64,
    upper_arm_length: f64,
    rod_length: f64,
    arm_azimuths: [f64; 3],
    joint_angle_limits: [[f64; 2]; 3],
    #[serde(default = "default_inverted")]
    inverted: bool,
    #[serde(default = "default_torque_limit")]
    torque_limit_nm: f64,
}

fn default_inverted() -> bool {
    true
}

fn default_torque_limit() -> f64 {
    DEFAULT_TORQUE_LIMIT_NM
}

impl From<DeltaGeometry> for GeometryFile {
    fn from(g: DeltaGeometry) -> Self {
        Self {
            base_joint_radius: g.base_joint_radius,
            platform_joint_radius: g.platform_joint_radius,
            upper_arm_length: g.upper_arm_length,
            rod_length: g.rod_length,
            arm_azimuths: g.arm_azimuths.map(f64::to_degrees),
            joint_angle_limits: g.joint_angle_limits.map(|l| l.map(f64::to_degrees)),
            inverted: g.inverted,
            torque_limit_nm: g.torque_limit,
        }
    }
}

impl TryFrom<GeometryFile> for DeltaGeometry {
    type Error = GeometryError;

    fn try_from(f: GeometryFile) -> Result<Self, Self::Error> {
        let g = DeltaGeometry {
            base_joint_radius: f.base_joint_radius,
            platform_joint_radius: f.platform_joint_radius,
            upper_arm_length: f.upper_arm_length,
            rod_length: f.rod_length,
            arm_azimuths: f.arm_azimuths.map(f64::to_radians),
            joint_angle_limits: f.joint_angle_limits.map(|l| l.map(f64::to_radians)),
            inverted: f.inverted,
            torque_limit: f.torque_limit_nm,
        };
        g.validate()?;
        Ok(g)
    }
}

/// The restricted working cylinder under the finger pad.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WorkspaceSpec {
    /// Disc radius in mm (6.5 mm for the ⌀13 mm work area).
    pub radius: f64,
    /// Vertical travel in mm.
    pub z_travel: f64,
    /// z of the finger-pad surface.
    pub contact_plane_z: f64,
    /// Bottom of the cylinder; the top is `z_min + z_travel`.
    pub z_min: f64,
}

/// Hover distance below the pad between stimuli, mm.
pub const HOVER_HEIGHT_MM: f64 = 5.0;

impl Default for WorkspaceSpec {
    fn default() -> Self {
        Self {
            radius: 6.5,
            z_travel: 8.0,
            contact_plane_z: 34.0,
            z_min: 28.0,
        }
    }
}

impl WorkspaceSpec {
    pub fn z_max(&self) -> f64 {
        self.z_min + self.z_travel
    }

    pub fn hover_z(&self) -> f64 {
        self.contact_plane_z - HOVER_HEIGHT_MM
    }

    /// Centre hover pose, the rest position between stimuli.
    pub fn home(&self) -> Pose {
        Pose::new(0.0, 0.0, self.hover_z())
    }

    pub fn validate(&self) -> Result<(), GeometryError> {
        if !(self.radius > 0.0) {
            return Err(GeometryError::NonPositive("radius", self.radius));
        }
        if !(self.z_travel > 0.0) {
            return Err(GeometryError::NonPositive("z_travel", self.z_travel));
        }
        let hover = self.hover_z();
        if hover < self.z_min || hover > self.z_max() {
            return Err(GeometryError::Workspace(format!(
                "hover plane z = {hover} mm lies outside [{}, {}]",
                self.z_min,
                self.z_max()
            )));
        }
        if self.contact_plane_z > self.z_max() {
            return Err(GeometryError::Workspace(format!(
                "contact plane z = {} mm lies above the travel top {}",
                self.contact_plane_z,
                self.z_max()
            )));
        }
        Ok(())
    }

    /// Membership with a small absolute tolerance for rounding at the boundary.
    pub fn contains(&self, p: &Pose) -> bool {
        const TOL: f64 = 1e-9;
        p.is_finite()
            && p.radial() <= self.radius + TOL
            && p.z >= self.z_min - TOL
            && p.z <= self.z_max() + TOL
    }

    pub fn disc_contains(&self, x: f64, y: f64) -> bool {
        x.hypot(y) <= self.radius + 1e-9
    }
}
