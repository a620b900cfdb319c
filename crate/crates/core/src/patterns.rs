//! Stimulus catalogue: the nine static contact points, the eight skin-stretch
//! directions, and the five-mode [`Stimulus`] model.
//!
//! Layout convention: `U` points toward the fingertip (+y), `R` is +x. The
//! eight peripheral contact points sit on a ring at 45° steps around `C`.

use std::f64::consts::FRAC_1_SQRT_2;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{DeltaGeometry, Pose, WorkspaceSpec};
use crate::kinematics::{inverse_kinematics, max_normal_force};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PatternError {
    #[error("stretch path from ({:.3}, {:.3}) to ({:.3}, {:.3}) leaves the {radius} mm work disc", start.x, start.y, end.x, end.y)]
    PathOutsideWorkspace { start: Pose, end: Pose, radius: f64 },
    #[error("unknown pattern label {0:?}")]
    UnknownLabel(String),
    #[error("invalid layout: {0}")]
    InvalidLayout(String),
}

/// Unit heading in the pad plane for an angle in degrees from +x.
fn heading(deg: f64) -> (f64, f64) {
    // exact values on the axes keep the catalogue free of 1e-17 noise
    match deg as i32 {
        0 => (1.0, 0.0),
        45 => (FRAC_1_SQRT_2, FRAC_1_SQRT_2),
        90 => (0.0, 1.0),
        135 => (-FRAC_1_SQRT_2, FRAC_1_SQRT_2),
        180 => (-1.0, 0.0),
        225 => (-FRAC_1_SQRT_2, -FRAC_1_SQRT_2),
        270 => (0.0, -1.0),
        315 => (FRAC_1_SQRT_2, -FRAC_1_SQRT_2),
        _ => {
            let r = deg.to_radians();
            (r.cos(), r.sin())
        }
    }
}

/// Static contact locations on the pad.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ContactPatternId {
    C,
    U,
    D,
    L,
    R,
    UL,
    UR,
    DL,
    DR,
}

impl ContactPatternId {
    pub const ALL: [ContactPatternId; 9] = [
        Self::C,
        Self::U,
        Self::D,
        Self::L,
        Self::R,
        Self::UL,
        Self::UR,
        Self::DL,
        Self::DR,
    ];

    pub fn label(self) -> &'static str {
        match self {
            Self::C => "C",
            Self::U => "U",
            Self::D => "D",
            Self::L => "L",
            Self::R => "R",
            Self::UL => "UL",
            Self::UR => "UR",
            Self::DL => "DL",
            Self::DR => "DR",
        }
    }

    /// Ring heading in degrees from +x; `None` for the centre.
    pub fn heading_deg(self) -> Option<f64> {
        match self {
            Self::C => None,
            Self::R => Some(0.0),
            Self::UR => Some(45.0),
            Self::U => Some(90.0),
            Self::UL => Some(135.0),
            Self::L => Some(180.0),
            Self::DL => Some(225.0),
            Self::D => Some(270.0),
            Self::DR => Some(315.0),
        }
    }

    pub fn index(self) -> usize {
        Self::ALL.iter().position(|p| *p == self).unwrap()
    }
}

impl fmt::Display for ContactPatternId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for ContactPatternId {
    type Err = PatternError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .into_iter()
            .find(|p| p.label().eq_ignore_ascii_case(s))
            .ok_or_else(|| PatternError::UnknownLabel(s.to_string()))
    }
}

/// Skin-stretch stroke directions at 45° increments.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum StretchDirection {
    U,
    UR,
    R,
    DR,
    D,
    DL,
    L,
    UL,
}

impl StretchDirection {
    pub const ALL: [StretchDirection; 8] = [
        Self::U,
        Self::UR,
        Self::R,
        Self::DR,
        Self::D,
        Self::DL,
        Self::L,
        Self::UL,
    ];

    pub fn label(self) -> &'static str {
        match self {
            Self::U => "U",
            Self::UR => "UR",
            Self::R => "R",
            Self::DR => "DR",
            Self::D => "D",
            Self::DL => "DL",
            Self::L => "L",
            Self::UL => "UL",
        }
    }

    pub fn heading_deg(self) -> f64 {
        match self {
            Self::R => 0.0,
            Self::UR => 45.0,
            Self::U => 90.0,
            Self::UL => 135.0,
            Self::L => 180.0,
            Self::DL => 225.0,
            Self::D => 270.0,
            Self::DR => 315.0,
        }
    }

    pub fn unit(self) -> (f64, f64) {
        heading(self.heading_deg())
    }

    pub fn opposite(self) -> StretchDirection {
        let idx = Self::ALL.iter().position(|d| *d == self).unwrap();
        Self::ALL[(idx + 4) % 8]
    }

    pub fn index(self) -> usize {
        Self::ALL.iter().position(|d| *d == self).unwrap()
    }
}

impl fmt::Display for StretchDirection {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for StretchDirection {
    type Err = PatternError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .into_iter()
            .find(|p| p.label().eq_ignore_ascii_case(s))
            .ok_or_else(|| PatternError::UnknownLabel(s.to_string()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PatternLayout {
    /// Radius of the peripheral contact ring, mm.
    pub ring_radius: f64,
    /// Stroke length, mm, centred on the pad centre.
    pub stretch_length: f64,
    /// Stroke speed, mm/s.
    pub stretch_speed: f64,
    pub contact_plane_z: f64,
    /// Radius of the work disc the catalogue must stay inside.
    pub disc_radius: f64,
}

impl Default for PatternLayout {
    fn default() -> Self {
        Self::for_workspace(&WorkspaceSpec::default())
    }
}

impl PatternLayout {
    pub fn for_workspace(spec: &WorkspaceSpec) -> Self {
        Self {
            ring_radius: 4.5,
            stretch_length: 6.0,
            stretch_speed: 20.0,
            contact_plane_z: spec.contact_plane_z,
            disc_radius: spec.radius,
        }
    }

    pub fn validate(&self) -> Result<(), PatternError> {
        if !(self.ring_radius > 0.0) || self.ring_radius > self.disc_radius {
            return Err(PatternError::InvalidLayout(format!(
                "ring radius {} must be in (0, {}]",
                self.ring_radius, self.disc_radius
            )));
        }
        if !(self.stretch_length > 0.0) || !(self.stretch_speed > 0.0) {
            return Err(PatternError::InvalidLayout(
                "stretch length and speed must be positive".into(),
            ));
        }
        if self.stretch_length / 2.0 > self.disc_radius {
            return Err(PatternError::InvalidLayout(format!(
                "stretch length {} does not fit the {} mm disc",
                self.stretch_length, self.disc_radius
            )));
        }
        Ok(())
    }
}

pub fn contact_point_position(id: ContactPatternId, layout: &PatternLayout) -> Pose {
    match id.heading_deg() {
        None => Pose::new(0.0, 0.0, layout.contact_plane_z),
        Some(deg) => {
            let (ux, uy) = heading(deg);
            Pose::new(
                layout.ring_radius * ux,
                layout.ring_radius * uy,
                layout.contact_plane_z,
            )
        }
    }
}

/// Stroke endpoints on the pad plane; the stroke passes through the centre.
pub fn stretch_path(direction: StretchDirection, layout: &PatternLayout) -> Result<(Pose, Pose), PatternError> {
    let (ux, uy) = direction.unit();
    let half = layout.stretch_length / 2.0;
    let z = layout.contact_plane_z;
    let start = Pose::new(-half * ux, -half * uy, z);
    let end = Pose::new(half * ux, half * uy, z);
    let limit = layout.disc_radius + 1e-9;
    if start.radial() > limit || end.radial() > limit {
        return Err(PatternError::PathOutsideWorkspace {
            start,
            end,
            radius: layout.disc_radius,
        });
    }
    Ok((start, end))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum VibrationEnvelope {
    Constant,
    /// On for half of each period.
    Pulsed { period: f64 },
}

/// One renderable haptic primitive. Forces in N, lengths in mm, times in s.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum Stimulus {
    Contact {
        point: Pose,
        force: f64,
    },
    Pressure {
        point: Pose,
        force: f64,
        duration: f64,
    },
    Encounter {
        point: Pose,
        hover_height: f64,
    },
    SkinStretch {
        direction: StretchDirection,
        start: Pose,
        length: f64,
        speed: f64,
        normal_force: f64,
    },
    Vibration {
        duty: f64,
        duration: f64,
        envelope: VibrationEnvelope,
    },
}

impl Stimulus {
    pub fn contact_pattern(id: ContactPatternId, layout: &PatternLayout, force: f64) -> Stimulus {
        Stimulus::Contact {
            point: contact_point_position(id, layout),
            force,
        }
    }

    pub fn stretch_pattern(
        direction: StretchDirection,
        layout: &PatternLayout,
        normal_force: f64,
    ) -> Result<Stimulus, PatternError> {
        let (start, _) = stretch_path(direction, layout)?;
        Ok(Stimulus::SkinStretch {
            direction,
            start,
            length: layout.stretch_length,
            speed: layout.stretch_speed,
            normal_force,
        })
    }

    /// End of the stroke for skin stretch.
    pub fn stretch_end(&self) -> Option<Pose> {
        match *self {
            Stimulus::SkinStretch { direction, start, length, .. } => {
                let (ux, uy) = direction.unit();
                Some(Pose::new(start.x + length * ux, start.y + length * uy, start.z))
            }
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Violation {
    OutsideWorkspace { pose: Pose },
    Unreachable { pose: Pose },
    PathOutsideWorkspace { start: Pose, end: Pose },
    ForceInfeasible { force: f64, max: f64 },
    NonPositiveForce { force: f64 },
    NonPositiveDuration { duration: f64 },
    DutyOutOfRange { duty: f64 },
    InvalidParameter { name: String, value: f64 },
}

/// Check a stimulus against the workspace and force capability, collecting
/// every violation.
pub fn validate_stimulus(s: &Stimulus, geom: &DeltaGeometry, spec: &WorkspaceSpec) -> Vec<Violation> {
    let mut out = Vec::new();
    let hover = crate::geometry::HOVER_HEIGHT_MM;

    let check_point = |p: &Pose, out: &mut Vec<Violation>| -> bool {
        if !spec.contains(p) {
            out.push(Violation::OutsideWorkspace { pose: *p });
            false
        } else if inverse_kinematics(geom, p).is_err() {
            out.push(Violation::Unreachable { pose: *p });
            false
        } else {
            true
        }
    };
    // feasibility is only meaningful for a positive force at a reachable point
    let force_violation = |points: &[Pose], force: f64| -> Option<Violation> {
        points.iter().find_map(|p| match max_normal_force(geom, p, geom.torque_limit) {
            Ok(max) if force > max => Some(Violation::ForceInfeasible { force, max }),
            _ => None,
        })
    };
    let check_duration = |d: f64, out: &mut Vec<Violation>| {
        if !(d > 0.0) || !d.is_finite() {
            out.push(Violation::NonPositiveDuration { duration: d });
        }
    };

    match *s {
        Stimulus::Contact { point, force } | Stimulus::Pressure { point, force, .. } => {
            let at_pad = check_point(&point, &mut out);
            let at_hover = check_point(&point.with_z(point.z - hover), &mut out);
            if !(force > 0.0) {
                out.push(Violation::NonPositiveForce { force });
            } else if at_pad && at_hover {
                out.extend(force_violation(&[point], force));
            }
            if let Stimulus::Pressure { duration, .. } = *s {
                check_duration(duration, &mut out);
            }
        }
        Stimulus::Encounter { point, hover_height } => {
            if !(hover_height > 0.0) {
                out.push(Violation::InvalidParameter {
                    name: "hover_height".into(),
                    value: hover_height,
                });
            } else {
                check_point(&point.with_z(point.z - hover_height), &mut out);
            }
        }
        Stimulus::SkinStretch { start, length, speed, normal_force, .. } => {
            if !(length > 0.0) {
                out.push(Violation::InvalidParameter { name: "length".into(), value: length });
            }
            if !(speed > 0.0) {
                out.push(Violation::InvalidParameter { name: "speed".into(), value: speed });
            }
            let end = s.stretch_end().unwrap();
            let mut reachable = false;
            if !spec.disc_contains(start.x, start.y) || !spec.disc_contains(end.x, end.y) {
                out.push(Violation::PathOutsideWorkspace { start, end });
            } else {
                let path = [start, start.lerp(&end, 0.5), end, start.with_z(start.z - hover)];
                reachable = path
                    .iter()
                    .map(|p| check_point(p, &mut out))
                    .fold(true, |a, b| a & b);
            }
            if !(normal_force > 0.0) {
                out.push(Violation::NonPositiveForce { force: normal_force });
            } else if reachable {
                out.extend(force_violation(&[start, start.lerp(&end, 0.5), end], normal_force));
            }
        }
        Stimulus::Vibration { duty, duration, envelope } => {
            if !(0.0..=1.0).contains(&duty) {
                out.push(Violation::DutyOutOfRange { duty });
            }
            check_duration(duration, &mut out);
            if let VibrationEnvelope::Pulsed { period } = envelope {
                if !(period > 0.0) {
                    out.push(Violation::InvalidParameter { name: "period".into(), value: period });
                }
            }
        }
    }
    out
}

/// Which of the two discrimination studies a session belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Contact,
    Stretch,
}

impl Mode {
    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Contact => "contact",
            Mode::Stretch => "stretch",
        }
    }

    /// The pattern set in catalogue order.
    pub fn patterns(self) -> Vec<PatternId> {
        match self {
            Mode::Contact => ContactPatternId::ALL.iter().map(|&p| PatternId::Contact(p)).collect(),
            Mode::Stretch => StretchDirection::ALL.iter().map(|&d| PatternId::Stretch(d)).collect(),
        }
    }

    pub fn pattern_count(self) -> usize {
        match self {
            Mode::Contact => ContactPatternId::ALL.len(),
            Mode::Stretch => StretchDirection::ALL.len(),
        }
    }

    pub fn parse_pattern(self, label: &str) -> Result<PatternId, PatternError> {
        match self {
            Mode::Contact => label.parse().map(PatternId::Contact),
            Mode::Stretch => label.parse().map(PatternId::Stretch),
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Mode {
    type Err = PatternError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "contact" => Ok(Mode::Contact),
            "stretch" => Ok(Mode::Stretch),
            _ => Err(PatternError::UnknownLabel(s.to_string())),
        }
    }
}

/// A pattern of either study.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum PatternId {
    Contact(ContactPatternId),
    Stretch(StretchDirection),
}

impl PatternId {
    pub fn mode(self) -> Mode {
        match self {
            PatternId::Contact(_) => Mode::Contact,
            PatternId::Stretch(_) => Mode::Stretch,
        }
    }

    /// Position in the mode's catalogue order.
    pub fn index(self) -> usize {
        match self {
            PatternId::Contact(p) => p.index(),
            PatternId::Stretch(d) => d.index(),
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            PatternId::Contact(p) => p.label(),
            PatternId::Stretch(d) => d.label(),
        }
    }

    /// Stimulus for this pattern at the given normal force.
    pub fn stimulus(self, layout: &PatternLayout, force: f64) -> Result<Stimulus, PatternError> {
        match self {
            PatternId::Contact(p) => Ok(Stimulus::contact_pattern(p, layout, force)),
            PatternId::Stretch(d) => Stimulus::stretch_pattern(d, layout, force),
        }
    }
}

impl fmt::Display for PatternId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ContactEntry {
    pub id: ContactPatternId,
    pub pose: Pose,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StretchEntry {
    pub direction: StretchDirection,
    pub start: Pose,
    pub end: Pose,
}

/// The pattern catalogue as served to the console's visual guides.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Catalog {
    pub layout: PatternLayout,
    #[serde(skip_serializing_if = "Vec::is_empty", default)]
    pub contact: Vec<ContactEntry>,
    #[serde(skip_serializing_if = "Vec::is_empty", default)]
    pub stretch: Vec<StretchEntry>,
}

impl Catalog {
    pub fn build(layout: &PatternLayout, contact: bool, stretch: bool) -> Result<Catalog, PatternError> {
        let contact = if contact {
            ContactPatternId::ALL
                .iter()
                .map(|&id| ContactEntry { id, pose: contact_point_position(id, layout) })
                .collect()
        } else {
            Vec::new()
        };
        let stretch = if stretch {
            StretchDirection::ALL
                .iter()
                .map(|&direction| {
                    stretch_path(direction, layout).map(|(start, end)| StretchEntry { direction, start, end })
                })
                .collect::<Result<_, _>>()?
        } else {
            Vec::new()
        };
        Ok(Catalog { layout: *layout, contact, stretch })
    }
}
