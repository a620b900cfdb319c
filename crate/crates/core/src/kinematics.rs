//! Closed-form kinematics, Jacobian and static force mapping for the
//! inverted Delta.
//!
//! Each arm's elbow lies on a circle in the arm's vertical plane; the rod
//! then constrains the platform joint to a sphere around the elbow. Shifting
//! every sphere inward by the platform joint radius turns the platform into
//! a point, so
//!
//! ```text
//! c_i(θ) = (R - r + L cos θ) u_i + L sin θ ẑ,   |p - c_i(θ_i)| = l
//! ```
//!
//! Inverse kinematics solves that per arm (circle–sphere intersection);
//! forward kinematics intersects the three spheres and keeps the +z root.

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{DeltaGeometry, ForceVector, JointAngles, Pose, TorqueTriple, WorkspaceSpec};

/// Jacobians with a condition number above this are treated as singular.
pub const SINGULAR_CONDITION: f64 = 1e8;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum KinematicsError {
    #[error("pose ({:.3}, {:.3}, {:.3}) mm is unreachable by arm {arm}", pose.x, pose.y, pose.z)]
    Unreachable { arm: usize, pose: Pose },
    #[error("joint {arm} angle {:.3} deg is outside its limits", angle.to_degrees())]
    JointLimit { arm: usize, angle: f64 },
    #[error("rod spheres do not intersect")]
    NoIntersection,
    #[error("singular configuration (condition number {condition:.3e})")]
    Singular { condition: f64 },
    #[error("non-finite input")]
    NonFinite,
    #[error("torques {:?} N·m exceed the limit {limit} N·m", torques.torques)]
    TorqueLimitExceeded { torques: TorqueTriple, limit: f64 },
    #[error("{unreachable} of {samples} workspace samples are unreachable")]
    GeometryInfeasible { unreachable: usize, samples: usize },
}

/// Sphere centre for arm `i` at shaft angle `theta` (platform joint offset folded in).
pub fn sphere_center(geom: &DeltaGeometry, i: usize, theta: f64) -> Vector3<f64> {
    let (s, c) = theta.sin_cos();
    geom.radial_axis(i) * (geom.effective_radius() + geom.upper_arm_length * c)
        + Vector3::z() * (geom.upper_arm_length * s)
}

fn sphere_center_derivative(geom: &DeltaGeometry, i: usize, theta: f64) -> Vector3<f64> {
    let (s, c) = theta.sin_cos();
    geom.radial_axis(i) * (-geom.upper_arm_length * s) + Vector3::z() * (geom.upper_arm_length * c)
}

fn wrap_angle(a: f64) -> f64 {
    let w = a.rem_euclid(2.0 * std::f64::consts::PI);
    if w > std::f64::consts::PI {
        w - 2.0 * std::f64::consts::PI
    } else {
        w
    }
}

/// Shaft angle for one arm, ignoring joint limits. Knee-outward branch.
pub fn solve_arm(geom: &DeltaGeometry, i: usize, pose: &Pose) -> Result<f64, KinematicsError> {
    let p = pose.to_vector();
    let rho = p.dot(&geom.radial_axis(i));
    let lateral = p.dot(&geom.tangent_axis(i));
    let arm = geom.upper_arm_length;
    // rod projected into the arm plane
    let in_plane_sq = geom.rod_length * geom.rod_length - lateral * lateral;
    if in_plane_sq <= 0.0 {
        return Err(KinematicsError::Unreachable { arm: i, pose: *pose });
    }
    let a = rho - geom.effective_radius();
    let b = p.z;
    let m = a.hypot(b);
    let c = (a * a + b * b + arm * arm - in_plane_sq) / (2.0 * arm);
    if m == 0.0 || c.abs() > m {
        return Err(KinematicsError::Unreachable { arm: i, pose: *pose });
    }
    let phi = b.atan2(a);
    let alpha = (c / m).clamp(-1.0, 1.0).acos();
    let (t1, t2) = (phi - alpha, phi + alpha);
    // larger cos θ puts the elbow farther from the device axis
    let theta = if t1.cos() >= t2.cos() { t1 } else { t2 };
    Ok(wrap_angle(theta))
}

pub fn inverse_kinematics(geom: &DeltaGeometry, pose: &Pose) -> Result<JointAngles, KinematicsError> {
    if !pose.is_finite() {
        return Err(KinematicsError::NonFinite);
    }
    let mut theta = [0.0; 3];
    for (i, t) in theta.iter_mut().enumerate() {
        *t = solve_arm(geom, i, pose)?;
        if !geom.within_limits(i, *t) {
            return Err(KinematicsError::JointLimit { arm: i, angle: *t });
        }
    }
    Ok(JointAngles::new(theta))
}

/// Three-sphere intersection on the finger-pad (+z) side.
pub fn forward_kinematics(geom: &DeltaGeometry, angles: &JointAngles) -> Result<Pose, KinematicsError> {
    for (i, t) in angles.theta.iter().enumerate() {
        if !t.is_finite() {
            return Err(KinematicsError::NonFinite);
        }
        if !geom.within_limits(i, *t) {
            return Err(KinematicsError::JointLimit { arm: i, angle: *t });
        }
    }
    let c: [Vector3<f64>; 3] = std::array::from_fn(|i| sphere_center(geom, i, angles.theta[i]));
    let l = geom.rod_length;
    let eps = 1e-9 * geom.upper_arm_length.max(1.0);

    let d21 = c[1] - c[0];
    let d = d21.norm();
    if d < eps {
        return Err(KinematicsError::Singular { condition: f64::INFINITY });
    }
    let ex = d21 / d;
    let d31 = c[2] - c[0];
    let i = ex.dot(&d31);
    let ey_raw = d31 - ex * i;
    let j = ey_raw.norm();
    if j < eps {
        return Err(KinematicsError::Singular { condition: f64::INFINITY });
    }
    let ey = ey_raw / j;
    let ez = ex.cross(&ey);
    // equal radii simplify the textbook trilateration
    let x = d / 2.0;
    let y = (i * i + j * j - 2.0 * i * x) / (2.0 * j);
    let mut h2 = l * l - x * x - y * y;
    if h2 < 0.0 {
        if h2 > -1e-9 * l * l {
            h2 = 0.0;
        } else {
            return Err(KinematicsError::NoIntersection);
        }
    }
    let h = h2.sqrt();
    let base = c[0] + ex * x + ey * y;
    let p1 = base + ez * h;
    let p2 = base - ez * h;
    let p = if p1.z >= p2.z { p1 } else { p2 };
    Ok(Pose::from_vector(&p))
}

/// Condition number via singular values.
pub fn condition_number(m: &Matrix3<f64>) -> f64 {
    let sv = m.singular_values();
    let max = sv.max();
    let min = sv.min();
    if min == 0.0 {
        f64::INFINITY
    } else {
        max / min
    }
}

fn jacobian_at(geom: &DeltaGeometry, pose: &Pose, angles: &JointAngles) -> Result<Matrix3<f64>, KinematicsError> {
    let p = pose.to_vector();
    let mut jac = Matrix3::zeros();
    for i in 0..3 {
        let c = sphere_center(geom, i, angles.theta[i]);
        let dc = sphere_center_derivative(geom, i, angles.theta[i]);
        let rod = p - c;
        let denom = rod.dot(&dc);
        if denom.abs() < 1e-12 * rod.norm() * dc.norm() {
            return Err(KinematicsError::Singular { condition: f64::INFINITY });
        }
        jac.set_row(i, &(rod / denom).transpose());
    }
    let cond = condition_number(&jac);
    if !(cond <= SINGULAR_CONDITION) {
        return Err(KinematicsError::Singular { condition: cond });
    }
    Ok(jac)
}

/// ∂θ/∂x of the inverse kinematics at `pose`, rad per mm.
///
/// Differentiating `|p - c_i(θ_i)|² = l²` gives row i as
/// `(p - c_i)ᵀ / ((p - c_i) · c_i'(θ_i))`.
pub fn jacobian(geom: &DeltaGeometry, pose: &Pose) -> Result<Matrix3<f64>, KinematicsError> {
    let angles = inverse_kinematics(geom, pose)?;
    jacobian_at(geom, pose, &angles)
}

/// ∂x/∂θ, mm per rad. Inverse of [`jacobian`].
pub fn forward_jacobian(geom: &DeltaGeometry, pose: &Pose) -> Result<Matrix3<f64>, KinematicsError> {
    let j = jacobian(geom, pose)?;
    j.try_inverse()
        .ok_or(KinematicsError::Singular { condition: f64::INFINITY })
}

/// Shaft torques that make the tactor exert `force` on the pad, without a limit check.
pub fn joint_torques(geom: &DeltaGeometry, pose: &Pose, force: &ForceVector) -> Result<TorqueTriple, KinematicsError> {
    let jx = forward_jacobian(geom, pose)?;
    // N·mm -> N·m
    let tau = jx.transpose() * force.to_vector() / 1000.0;
    Ok(TorqueTriple { torques: [tau.x, tau.y, tau.z] })
}

/// Static torque map `τ = Jxᵀ f`, rejecting torques beyond the servo limit.
pub fn torques_for_force(geom: &DeltaGeometry, pose: &Pose, force: &ForceVector) -> Result<TorqueTriple, KinematicsError> {
    let torques = joint_torques(geom, pose, force)?;
    if torques.max_abs() > geom.torque_limit {
        return Err(KinematicsError::TorqueLimitExceeded { torques, limit: geom.torque_limit });
    }
    Ok(torques)
}

/// Inverse of [`joint_torques`]: the pad force produced by the given shaft torques.
pub fn force_for_torques(geom: &DeltaGeometry, pose: &Pose, torques: &TorqueTriple) -> Result<ForceVector, KinematicsError> {
    let j = jacobian(geom, pose)?;
    let t = Vector3::from(torques.torques) * 1000.0;
    Ok(ForceVector::from_vector(&(j.transpose() * t)))
}

/// Largest pure normal force with every |τ_i| ≤ `torque_limit` (N·m).
pub fn max_normal_force(geom: &DeltaGeometry, pose: &Pose, torque_limit: f64) -> Result<f64, KinematicsError> {
    let jx = forward_jacobian(geom, pose)?;
    let limit_nmm = torque_limit * 1000.0;
    let best = (0..3)
        .map(|i| jx[(2, i)].abs())
        .filter(|g| *g > 0.0)
        .map(|g| limit_nmm / g)
        .fold(f64::INFINITY, f64::min);
    Ok(best)
}

/// One grid sample of a workspace sweep.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct WorkspaceSample {
    pub pose: Pose,
    pub reachable: bool,
    pub angles_deg: Option<[f64; 3]>,
    pub condition: Option<f64>,
    /// Only filled on the contact plane.
    pub max_normal_force: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct WorkspaceReport {
    pub step_mm: f64,
    pub samples: usize,
    pub reachable: usize,
    pub fraction_reachable: f64,
    pub contact_plane_samples: usize,
    pub min_contact_force: f64,
    pub max_contact_force: f64,
    pub worst_condition: f64,
    pub torque_limit_nm: f64,
    #[serde(skip)]
    pub grid: Vec<WorkspaceSample>,
}

impl WorkspaceReport {
    /// CSV dump of the sample grid.
    pub fn write_grid_csv<W: std::io::Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "x,y,z,reachable,theta1_deg,theta2_deg,theta3_deg,condition,max_normal_force")?;
        let opt = |v: Option<f64>| v.map(|v| format!("{v:.9}")).unwrap_or_default();
        for s in &self.grid {
            let [a, b, c] = s.angles_deg.map(|a| a.map(Some)).unwrap_or([None; 3]);
            writeln!(
                out,
                "{:.6},{:.6},{:.6},{},{},{},{},{},{}",
                s.pose.x,
                s.pose.y,
                s.pose.z,
                s.reachable as u8,
                opt(a),
                opt(b),
                opt(c),
                opt(s.condition),
                opt(s.max_normal_force)
            )?;
        }
        Ok(())
    }
}

/// Points on a regular grid of spacing ≤ `step` inside the disc, plus a ring
/// of boundary points so the rim is always sampled.
fn disc_points(radius: f64, step: f64) -> Vec<(f64, f64)> {
    let n = (2.0 * radius / step).ceil().max(1.0) as usize;
    let h = 2.0 * radius / n as f64;
    let mut pts = Vec::new();
    for ix in 0..=n {
        for iy in 0..=n {
            let x = -radius + ix as f64 * h;
            let y = -radius + iy as f64 * h;
            if x.hypot(y) <= radius + 1e-9 {
                pts.push((x, y));
            }
        }
    }
    let ring = ((2.0 * std::f64::consts::PI * radius / step).ceil() as usize).max(8);
    for k in 0..ring {
        let a = 2.0 * std::f64::consts::PI * k as f64 / ring as f64;
        pts.push((radius * a.cos(), radius * a.sin()));
    }
    pts
}

/// Grid sweep of the working cylinder, returning the report even when parts
/// are unreachable.
pub fn survey_workspace(geom: &DeltaGeometry, spec: &WorkspaceSpec, step: f64) -> WorkspaceReport {
    let step = step.clamp(1e-3, 0.5);
    let disc = disc_points(spec.radius, step);
    let nz = (spec.z_travel / step).ceil().max(1.0) as usize;
    let hz = spec.z_travel / nz as f64;
    let sample = |pose: Pose, with_force: bool| -> WorkspaceSample {
        match inverse_kinematics(geom, &pose) {
            Ok(angles) => {
                let jac = jacobian_at(geom, &pose, &angles);
                let condition = match &jac {
                    Ok(j) => Some(condition_number(j)),
                    Err(_) => None,
                };
                let force = if with_force {
                    max_normal_force(geom, &pose, geom.torque_limit).ok()
                } else {
                    None
                };
                WorkspaceSample {
                    pose,
                    reachable: jac.is_ok(),
                    angles_deg: Some(angles.to_degrees()),
                    condition,
                    max_normal_force: force,
                }
            }
            Err(_) => WorkspaceSample {
                pose,
                reachable: false,
                angles_deg: None,
                condition: None,
                max_normal_force: None,
            },
        }
    };

    let mut grid = Vec::with_capacity(disc.len() * (nz + 2));
    for iz in 0..=nz {
        let z = spec.z_min + iz as f64 * hz;
        for &(x, y) in &disc {
            grid.push(sample(Pose::new(x, y, z), false));
        }
    }
    let volume_samples = grid.len();
    for &(x, y) in &disc {
        grid.push(sample(Pose::new(x, y, spec.contact_plane_z), true));
    }

    let reachable = grid.iter().filter(|s| s.reachable).count();
    let forces: Vec<f64> = grid[volume_samples..]
        .iter()
        .filter_map(|s| s.max_normal_force)
        .collect();
    let worst_condition = grid
        .iter()
        .filter_map(|s| s.condition)
        .fold(0.0, f64::max);
    WorkspaceReport {
        step_mm: step,
        samples: grid.len(),
        reachable,
        fraction_reachable: reachable as f64 / grid.len() as f64,
        contact_plane_samples: grid.len() - volume_samples,
        min_contact_force: forces.iter().copied().fold(f64::INFINITY, f64::min),
        max_contact_force: forces.iter().copied().fold(0.0, f64::max),
        worst_condition,
        torque_limit_nm: geom.torque_limit,
        grid,
    }
}

/// Sweep the cylinder at 0.5 mm and fail unless every sample is reachable.
pub fn workspace_report(geom: &DeltaGeometry, spec: &WorkspaceSpec) -> Result<WorkspaceReport, KinematicsError> {
    let report = survey_workspace(geom, spec, 0.5);
    if report.reachable < report.samples {
        return Err(KinematicsError::GeometryInfeasible {
            unreachable: report.samples - report.reachable,
            samples: report.samples,
        });
    }
    Ok(report)
}

/// Whether `pose` is inside the cylinder and has an IK solution.
pub fn workspace_contains(geom: &DeltaGeometry, spec: &WorkspaceSpec, pose: &Pose) -> bool {
    spec.contains(pose) && inverse_kinematics(geom, pose).is_ok()
}
