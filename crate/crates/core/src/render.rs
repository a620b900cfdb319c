//! Stimulus → fixed-tick trajectory of poses, target forces and vibration duty.
//!
//! Every trajectory starts at the centre hover pose and is built from
//! straight segments sampled on the control tick. Segment durations are
//! rounded up to whole ticks, so no segment exceeds its nominal speed.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::DeviceModel;
use crate::geometry::{DeltaGeometry, ForceVector, Pose, WorkspaceSpec};
use crate::patterns::{
    stretch_path, validate_stimulus, ContactPatternId, PatternLayout, Stimulus, StretchDirection,
    VibrationEnvelope, Violation,
};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RenderError {
    #[error("force is not renderable: {0:?}")]
    InfeasibleForce(Vec<Violation>),
    #[error("stimulus leaves the workspace: {0:?}")]
    WorkspaceViolation(Vec<Violation>),
    #[error("invalid stimulus: {0:?}")]
    InvalidStimulus(Vec<Violation>),
    #[error("negative force {0} N")]
    NegativeForce(f64),
    #[error("t = {t} s is outside [0, {duration}]")]
    OutOfRange { t: f64, duration: f64 },
    #[error("invalid render config: {0}")]
    InvalidConfig(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RenderConfig {
    /// Control tick, Hz.
    pub tick_rate: f64,
    /// Non-contact distance below the pad, mm.
    pub hover_height: f64,
    /// Contact hold, s.
    pub contact_dwell: f64,
    /// mm/s
    pub approach_speed: f64,
    /// mm/s
    pub retract_speed: f64,
    /// Linear pad stiffness, N/mm.
    pub pad_stiffness: f64,
    /// mm
    pub max_penetration: f64,
    /// Normal force for pattern stimuli before per-subject calibration, N.
    pub default_force: f64,
}

impl Default for RenderConfig {
    fn default() -> Self {
        Self {
            tick_rate: 100.0,
            hover_height: 5.0,
            contact_dwell: 0.5,
            approach_speed: 30.0,
            retract_speed: 30.0,
            pad_stiffness: 2.0,
            max_penetration: 1.5,
            default_force: 1.0,
        }
    }
}

impl RenderConfig {
    pub fn validate(&self) -> Result<(), RenderError> {
        if !(self.tick_rate >= 50.0) {
            return Err(RenderError::InvalidConfig(format!("tick_rate {} < 50 Hz", self.tick_rate)));
        }
        for (name, v) in [
            ("hover_height", self.hover_height),
            ("contact_dwell", self.contact_dwell),
            ("approach_speed", self.approach_speed),
            ("retract_speed", self.retract_speed),
            ("pad_stiffness", self.pad_stiffness),
            ("max_penetration", self.max_penetration),
            ("default_force", self.default_force),
        ] {
            if !(v > 0.0) || !v.is_finite() {
                return Err(RenderError::InvalidConfig(format!("{name} must be positive")));
            }
        }
        Ok(())
    }

    pub fn tick(&self) -> f64 {
        1.0 / self.tick_rate
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Approach,
    Contact,
    Stroke,
    Dwell,
    Retract,
}

impl Phase {
    pub fn as_str(self) -> &'static str {
        match self {
            Phase::Approach => "approach",
            Phase::Contact => "contact",
            Phase::Stroke => "stroke",
            Phase::Dwell => "dwell",
            Phase::Retract => "retract",
        }
    }

    pub fn in_contact(self) -> bool {
        matches!(self, Phase::Contact | Phase::Stroke)
    }
}

/// A waypoint's phase, force and duty describe the interval that starts at it.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Waypoint {
    pub t: f64,
    pub pose: Pose,
    pub target_force: ForceVector,
    pub vibration_duty: f64,
    pub phase: Phase,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub tick_rate: f64,
    pub waypoints: Vec<Waypoint>,
    pub total_duration: f64,
    /// Deepest z the command chain may reach when quantizing these poses.
    #[serde(default = "unlimited")]
    pub depth_limit_z: f64,
}

fn unlimited() -> f64 {
    f64::INFINITY
}

impl Trajectory {
    pub fn first(&self) -> &Waypoint {
        &self.waypoints[0]
    }

    pub fn last(&self) -> &Waypoint {
        self.waypoints.last().unwrap()
    }

    /// Time span of consecutive waypoints in `phase` (first one to the next
    /// phase change), or `None` if the phase never occurs.
    pub fn phase_span(&self, phase: Phase) -> Option<(f64, f64)> {
        let start = self.waypoints.iter().position(|w| w.phase == phase)?;
        let end = self.waypoints[start..]
            .iter()
            .position(|w| w.phase != phase)
            .map(|off| self.waypoints[start + off].t)
            .unwrap_or(self.total_duration);
        Some((self.waypoints[start].t, end))
    }

    pub fn write_csv<W: std::io::Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "t,x,y,z,fx,fy,fz,duty,phase")?;
        for w in &self.waypoints {
            writeln!(
                out,
                "{:.4},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.4},{}",
                w.t,
                w.pose.x,
                w.pose.y,
                w.pose.z,
                w.target_force.fx,
                w.target_force.fy,
                w.target_force.fz,
                w.vibration_duty,
                w.phase.as_str()
            )?;
        }
        Ok(())
    }
}

/// Linear pad model: penetration for a normal force, clamped at the cap.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Depth {
    pub depth: f64,
    pub clamped: bool,
}

pub fn force_to_depth(force: f64, stiffness: f64, max_penetration: f64) -> Result<Depth, RenderError> {
    if force < 0.0 || force.is_nan() {
        return Err(RenderError::NegativeForce(force));
    }
    let depth = force / stiffness;
    if depth > max_penetration {
        Ok(Depth { depth: max_penetration, clamped: true })
    } else {
        Ok(Depth { depth, clamped: false })
    }
}

/// Interpolate a trajectory at time `t`.
pub fn sample(traj: &Trajectory, t: f64) -> Result<Waypoint, RenderError> {
    if !(t >= 0.0 && t <= traj.total_duration) {
        return Err(RenderError::OutOfRange { t, duration: traj.total_duration });
    }
    let wps = &traj.waypoints;
    // index of the last waypoint with time <= t
    let idx = wps.partition_point(|w| w.t <= t).saturating_sub(1);
    let a = &wps[idx];
    if a.t == t || idx + 1 == wps.len() {
        return Ok(*a);
    }
    let b = &wps[idx + 1];
    let u = (t - a.t) / (b.t - a.t);
    let lerp = |x: f64, y: f64| x + (y - x) * u;
    Ok(Waypoint {
        t,
        pose: a.pose.lerp(&b.pose, u),
        target_force: ForceVector::new(
            lerp(a.target_force.fx, b.target_force.fx),
            lerp(a.target_force.fy, b.target_force.fy),
            lerp(a.target_force.fz, b.target_force.fz),
        ),
        vibration_duty: lerp(a.vibration_duty, b.vibration_duty),
        phase: a.phase,
    })
}

struct Builder {
    tick_rate: f64,
    ticks: u64,
    waypoints: Vec<Waypoint>,
}

impl Builder {
    fn new(start: Pose, tick_rate: f64) -> Self {
        Self {
            tick_rate,
            ticks: 0,
            waypoints: vec![Waypoint {
                t: 0.0,
                pose: start,
                target_force: ForceVector::ZERO,
                vibration_duty: 0.0,
                phase: Phase::Approach,
            }],
        }
    }

    fn pose(&self) -> Pose {
        self.waypoints.last().unwrap().pose
    }

    fn begin(&mut self, phase: Phase, force: ForceVector, duty: f64) {
        let last = self.waypoints.last_mut().unwrap();
        last.phase = phase;
        last.target_force = force;
        last.vibration_duty = duty;
    }

    fn push(&mut self, pose: Pose, phase: Phase, force: ForceVector, duty: f64) {
        self.ticks += 1;
        self.waypoints.push(Waypoint {
            t: self.ticks as f64 / self.tick_rate,
            pose,
            target_force: force,
            vibration_duty: duty,
            phase,
        });
    }

    /// Straight move at no more than `speed`.
    fn move_to(&mut self, target: Pose, speed: f64, phase: Phase, force: ForceVector) {
        let from = self.pose();
        let dist = from.distance(&target);
        if dist == 0.0 {
            return;
        }
        let per_tick = speed / self.tick_rate;
        let n = ((dist / per_tick) - 1e-9).ceil().max(1.0) as u64;
        self.begin(phase, force, 0.0);
        for k in 1..=n {
            let pose = if k == n { target } else { from.lerp(&target, k as f64 / n as f64) };
            self.push(pose, phase, force, 0.0);
        }
    }

    /// Stay put for `duration` seconds, rounded to whole ticks.
    fn hold(&mut self, duration: f64, phase: Phase, force: ForceVector, duty: impl Fn(f64) -> f64) {
        let n = (duration * self.tick_rate - 1e-9).ceil().max(1.0) as u64;
        let pose = self.pose();
        self.begin(phase, force, duty(0.0));
        for k in 1..=n {
            let elapsed = k as f64 / self.tick_rate;
            let d = if k == n { 0.0 } else { duty(elapsed) };
            self.push(pose, phase, force, d);
        }
    }

    fn finish(mut self, phase: Phase) -> Trajectory {
        self.begin(phase, ForceVector::ZERO, 0.0);
        let total = self.ticks as f64 / self.tick_rate;
        Trajectory {
            tick_rate: self.tick_rate,
            waypoints: self.waypoints,
            total_duration: total,
            depth_limit_z: f64::INFINITY,
        }
    }
}

/// Renders stimuli for one device model.
#[derive(Debug, Clone)]
pub struct Renderer {
    pub config: RenderConfig,
    pub geometry: DeltaGeometry,
    pub workspace: WorkspaceSpec,
    pub layout: PatternLayout,
}

impl Renderer {
    pub fn new(model: &DeviceModel) -> Self {
        Self {
            config: model.render,
            geometry: model.geometry.clone(),
            workspace: model.workspace,
            layout: model.layout,
        }
    }

    pub fn home(&self) -> Pose {
        Pose::new(0.0, 0.0, self.workspace.contact_plane_z - self.config.hover_height)
    }

    fn max_speed(&self) -> f64 {
        self.config.approach_speed.max(self.config.retract_speed)
    }

    fn check(&self, s: &Stimulus) -> Result<(), RenderError> {
        let violations = validate_stimulus(s, &self.geometry, &self.workspace);
        if violations.is_empty() {
            return Ok(());
        }
        let force = violations
            .iter()
            .any(|v| matches!(v, Violation::ForceInfeasible { .. } | Violation::NonPositiveForce { .. }));
        let space = violations.iter().any(|v| {
            matches!(
                v,
                Violation::OutsideWorkspace { .. } | Violation::Unreachable { .. } | Violation::PathOutsideWorkspace { .. }
            )
        });
        Err(if space {
            RenderError::WorkspaceViolation(violations)
        } else if force {
            RenderError::InfeasibleForce(violations)
        } else {
            RenderError::InvalidStimulus(violations)
        })
    }

    fn verify(&self, mut traj: Trajectory) -> Result<Trajectory, RenderError> {
        traj.depth_limit_z = self.workspace.contact_plane_z + self.config.max_penetration;
        let outside: Vec<Violation> = traj
            .waypoints
            .iter()
            .filter(|w| !self.workspace.contains(&w.pose))
            .map(|w| Violation::OutsideWorkspace { pose: w.pose })
            .collect();
        if outside.is_empty() {
            Ok(traj)
        } else {
            Err(RenderError::WorkspaceViolation(outside))
        }
    }

    fn pad_depth(&self, force: f64) -> Result<(f64, ForceVector), RenderError> {
        let d = force_to_depth(force, self.config.pad_stiffness, self.config.max_penetration)?;
        // the force actually rendered when the depth is clamped
        Ok((d.depth, ForceVector::normal(d.depth * self.config.pad_stiffness)))
    }

    fn press(&self, point: Pose, force: f64, hold: f64, duty: impl Fn(f64) -> f64) -> Result<Trajectory, RenderError> {
        let cfg = &self.config;
        let (depth, target) = self.pad_depth(force)?;
        let hover = point.with_z(point.z - cfg.hover_height);
        let mut b = Builder::new(self.home(), cfg.tick_rate);
        b.move_to(hover, cfg.approach_speed, Phase::Approach, ForceVector::ZERO);
        b.move_to(point.with_z(point.z + depth), cfg.approach_speed, Phase::Approach, ForceVector::ZERO);
        b.hold(hold, Phase::Contact, target, duty);
        b.move_to(hover, cfg.retract_speed, Phase::Retract, ForceVector::ZERO);
        b.move_to(self.home(), cfg.retract_speed, Phase::Retract, ForceVector::ZERO);
        self.verify(b.finish(Phase::Retract))
    }

    pub fn contact_trial(&self, id: ContactPatternId, force: f64) -> Result<Trajectory, RenderError> {
        self.render(&Stimulus::contact_pattern(id, &self.layout, force))
    }

    pub fn stretch_trial(&self, direction: StretchDirection, force: f64) -> Result<Trajectory, RenderError> {
        let stim = Stimulus::stretch_pattern(direction, &self.layout, force).map_err(|_| {
            let (s, e) = (self.layout.stretch_length, self.layout.disc_radius);
            RenderError::WorkspaceViolation(vec![Violation::InvalidParameter {
                name: format!("stretch_length (disc radius {e})"),
                value: s,
            }])
        })?;
        self.render(&stim)
    }

    /// Move to the hover pose above `target` from the centre hover and park.
    pub fn encounter(&self, target: Pose) -> Result<Trajectory, RenderError> {
        self.reposition(self.home(), target, self.config.hover_height)
    }

    /// Non-contact transit from `from` to the hover pose above `target`.
    pub fn reposition(&self, from: Pose, target: Pose, hover_height: f64) -> Result<Trajectory, RenderError> {
        let stim = Stimulus::Encounter { point: target, hover_height };
        self.check(&stim)?;
        if !self.workspace.contains(&from) {
            return Err(RenderError::WorkspaceViolation(vec![Violation::OutsideWorkspace { pose: from }]));
        }
        let mut b = Builder::new(from, self.config.tick_rate);
        b.move_to(target.with_z(target.z - hover_height), self.max_speed(), Phase::Approach, ForceVector::ZERO);
        self.verify(b.finish(Phase::Dwell))
    }

    pub fn render(&self, stimulus: &Stimulus) -> Result<Trajectory, RenderError> {
        self.config.validate()?;
        self.check(stimulus)?;
        let cfg = &self.config;
        match *stimulus {
            Stimulus::Contact { point, force } => self.press(point, force, cfg.contact_dwell, |_| 0.0),
            Stimulus::Pressure { point, force, duration } => self.press(point, force, duration, |_| 0.0),
            Stimulus::Encounter { point, hover_height } => self.reposition(self.home(), point, hover_height),
            Stimulus::SkinStretch { start, speed, normal_force, .. } => {
                let end = stimulus.stretch_end().unwrap();
                let (depth, target) = self.pad_depth(normal_force)?;
                let hover_start = start.with_z(start.z - cfg.hover_height);
                let hover_end = end.with_z(end.z - cfg.hover_height);
                let mut b = Builder::new(self.home(), cfg.tick_rate);
                b.move_to(hover_start, cfg.approach_speed, Phase::Approach, ForceVector::ZERO);
                b.move_to(start.with_z(start.z + depth), cfg.approach_speed, Phase::Approach, ForceVector::ZERO);
                b.move_to(end.with_z(end.z + depth), speed, Phase::Stroke, target);
                b.move_to(hover_end, cfg.retract_speed, Phase::Retract, ForceVector::ZERO);
                b.move_to(self.home(), cfg.retract_speed, Phase::Retract, ForceVector::ZERO);
                self.verify(b.finish(Phase::Retract))
            }
            Stimulus::Vibration { duty, duration, envelope } => {
                let centre = Pose::new(0.0, 0.0, self.workspace.contact_plane_z);
                let profile = move |elapsed: f64| match envelope {
                    VibrationEnvelope::Constant => duty,
                    VibrationEnvelope::Pulsed { period } => {
                        if elapsed.rem_euclid(period) < period / 2.0 {
                            duty
                        } else {
                            0.0
                        }
                    }
                };
                self.press(centre, cfg.default_force, duration, profile)
            }
        }
    }
}

/// Render one of the nine contact-point trials.
pub fn render_contact_trial(id: ContactPatternId, model: &DeviceModel) -> Result<Trajectory, RenderError> {
    Renderer::new(model).contact_trial(id, model.render.default_force)
}

/// Render one of the eight skin-stretch trials.
pub fn render_stretch_trial(d: StretchDirection, model: &DeviceModel) -> Result<Trajectory, RenderError> {
    Renderer::new(model).stretch_trial(d, model.render.default_force)
}

pub fn render_encounter(target: Pose, model: &DeviceModel) -> Result<Trajectory, RenderError> {
    Renderer::new(model).encounter(target)
}

/// Stroke endpoints of a direction under the model's layout, for callers that
/// only need the path.
pub fn stroke_endpoints(d: StretchDirection, model: &DeviceModel) -> Option<(Pose, Pose)> {
    stretch_path(d, &model.layout).ok()
}
