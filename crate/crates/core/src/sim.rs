//! Virtual servo device and finger-pad contact model.

use std::collections::VecDeque;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{DeltaGeometry, JointAngles, Pose};
use crate::kinematics::{forward_kinematics, inverse_kinematics, KinematicsError};
use crate::protocol::{
    angle_to_pulse, angles_to_pulses, byte_to_duty, decode_frame, encode_frame, pulses_to_angles, Ack, AckFlags, Frame, Link,
    ProtocolError, ServoCalibration,
};
use crate::render::Trajectory;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SimError {
    #[error(transparent)]
    Protocol(#[from] ProtocolError),
    #[error(transparent)]
    Kinematics(#[from] KinematicsError),
    #[error("dt must be positive, got {0}")]
    BadDt(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FingerPadModel {
    pub contact_plane_z: f64,
    /// N/mm
    pub stiffness: f64,
    pub friction_mu: f64,
}

impl FingerPadModel {
    pub fn new(contact_plane_z: f64) -> Self {
        Self { contact_plane_z, stiffness: 2.0, friction_mu: 0.5 }
    }

    pub fn validate(&self) -> Result<(), String> {
        if !(self.stiffness > 0.0) {
            return Err(format!("pad stiffness {} must be positive", self.stiffness));
        }
        if !(0.0..=1.5).contains(&self.friction_mu) {
            return Err(format!("friction coefficient {} outside [0, 1.5]", self.friction_mu));
        }
        Ok(())
    }
}

/// Forces on the pad at one instant. Shear is the tangential force the
/// tactor applies to the skin, so it points along the tactor's sliding velocity.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ContactEvent {
    pub t: f64,
    pub position: Pose,
    pub normal_force: f64,
    pub shear_force: [f64; 2],
    pub in_contact: bool,
}

impl ContactEvent {
    pub fn shear_magnitude(&self) -> f64 {
        self.shear_force[0].hypot(self.shear_force[1])
    }
}

/// Velocity below this (mm/s) counts as static.
const STATIC_SPEED: f64 = 1e-9;

pub fn contact_force(pad: &FingerPadModel, pose: &Pose, velocity: [f64; 3]) -> ContactEvent {
    let depth = (pose.z - pad.contact_plane_z).max(0.0);
    let normal = pad.stiffness * depth;
    let speed = velocity[0].hypot(velocity[1]);
    let shear = if normal > 0.0 && speed > STATIC_SPEED {
        let s = pad.friction_mu * normal / speed;
        [velocity[0] * s, velocity[1] * s]
    } else {
        [0.0, 0.0]
    };
    ContactEvent {
        t: 0.0,
        position: *pose,
        normal_force: normal,
        shear_force: shear,
        in_contact: depth > 0.0,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DeviceState {
    pub t: f64,
    pub angles: JointAngles,
    pub pose: Pose,
    pub duty: f64,
    pub last_seq: Option<u8>,
    pub moving: bool,
}

/// Slew-limited servo surrogate fed by command frames.
#[derive(Debug, Clone)]
pub struct VirtualDevice {
    pub geometry: DeltaGeometry,
    pub calibration: ServoCalibration,
    /// deg/s
    pub slew_limit: f64,
    /// Frames take effect this many steps after arrival.
    pub latency_ticks: usize,
    angles: JointAngles,
    target: JointAngles,
    duty: f64,
    pipeline: VecDeque<(u64, Frame)>,
    ticks: u64,
    last_seq: Option<u8>,
    pose: Pose,
    t: f64,
    moving: bool,
}

impl VirtualDevice {
    /// Device resting at `pose`.
    pub fn new(geometry: DeltaGeometry, calibration: ServoCalibration, pose: &Pose) -> Result<Self, SimError> {
        let angles = inverse_kinematics(&geometry, pose)?;
        let pose = forward_kinematics(&geometry, &angles)?;
        Ok(Self {
            geometry,
            calibration,
            slew_limit: 600.0,
            latency_ticks: 1,
            angles,
            target: angles,
            duty: 0.0,
            pipeline: VecDeque::new(),
            ticks: 0,
            last_seq: None,
            pose,
            t: 0.0,
            moving: false,
        })
    }

    pub fn with_latency(mut self, ticks: usize) -> Self {
        self.latency_ticks = ticks;
        self
    }

    pub fn angles(&self) -> JointAngles {
        self.angles
    }

    pub fn pose(&self) -> Pose {
        self.pose
    }

    pub fn state(&self) -> DeviceState {
        DeviceState {
            t: self.t,
            angles: self.angles,
            pose: self.pose,
            duty: self.duty,
            last_seq: self.last_seq,
            moving: self.moving,
        }
    }

    /// Decode `bytes`, queue the frame and advance the servos by `dt` seconds.
    pub fn step(&mut self, bytes: &[u8], dt: f64) -> Result<DeviceState, SimError> {
        let frame = decode_frame(bytes)?;
        self.step_frame(Some(frame), dt)
    }

    /// Advance with an optional new frame.
    pub fn step_frame(&mut self, frame: Option<Frame>, dt: f64) -> Result<DeviceState, SimError> {
        if !(dt > 0.0) {
            return Err(SimError::BadDt(dt));
        }
        if let Some(f) = frame {
            self.last_seq = Some(f.seq);
            self.pipeline.push_back((self.ticks + self.latency_ticks as u64, f));
        }
        while self.pipeline.front().is_some_and(|(due, _)| *due <= self.ticks) {
            let (_, f) = self.pipeline.pop_front().unwrap();
            let mut target = pulses_to_angles(&f.pulses, &self.calibration);
            for (i, th) in target.theta.iter_mut().enumerate() {
                let [lo, hi] = self.geometry.joint_angle_limits[i];
                *th = th.clamp(lo, hi);
            }
            self.target = target;
            self.duty = byte_to_duty(f.duty);
        }
        let max_step = (self.slew_limit * dt).to_radians();
        let mut next = self.angles;
        for (cur, tgt) in next.theta.iter_mut().zip(self.target.theta) {
            *cur += (tgt - *cur).clamp(-max_step, max_step);
        }
        self.moving = next != self.angles;
        if self.moving {
            self.pose = forward_kinematics(&self.geometry, &next)?;
            self.angles = next;
        }
        self.t += dt;
        self.ticks += 1;
        Ok(self.state())
    }
}

/// Play a trajectory through the command chain and pad model, one event per waypoint.
pub fn simulate_trial(
    traj: &Trajectory,
    device: &mut VirtualDevice,
    pad: &FingerPadModel,
) -> Result<Vec<ContactEvent>, SimError> {
    let dt = 1.0 / traj.tick_rate;
    let mut events = Vec::with_capacity(traj.waypoints.len());
    let mut prev = device.pose();
    for (k, w) in traj.waypoints.iter().enumerate() {
        let pulses = pose_to_pulses(&device.geometry, &device.calibration, &w.pose, traj.depth_limit_z)?;
        let bytes = encode_frame(pulses, w.vibration_duty, k as u8, &device.calibration)?;
        let state = device.step(&bytes, dt)?;
        let v = [
            (state.pose.x - prev.x) / dt,
            (state.pose.y - prev.y) / dt,
            (state.pose.z - prev.z) / dt,
        ];
        prev = state.pose;
        let mut e = contact_force(pad, &state.pose, v);
        e.t = w.t;
        events.push(e);
    }
    Ok(events)
}

pub fn write_events_csv<W: std::io::Write>(events: &[ContactEvent], mut out: W) -> std::io::Result<()> {
    writeln!(out, "t,x,y,z,normal,shear_x,shear_y,in_contact")?;
    for e in events {
        writeln!(
            out,
            "{:.4},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{}",
            e.t, e.position.x, e.position.y, e.position.z, e.normal_force, e.shear_force[0], e.shear_force[1], e.in_contact
        )?;
    }
    Ok(())
}

/// In-process device behind the [`Link`] trait. Each accepted frame advances
/// the device by one tick; ACKs can be dropped to exercise retries.
pub struct SimLink {
    pub device: VirtualDevice,
    pub pad: FingerPadModel,
    pub dt: f64,
    rx: VecDeque<u8>,
    drops: VecDeque<bool>,
    pub frames_received: u64,
}

impl SimLink {
    pub fn new(device: VirtualDevice, pad: FingerPadModel, tick_rate: f64) -> Self {
        Self {
            device,
            pad,
            dt: 1.0 / tick_rate,
            rx: VecDeque::new(),
            drops: VecDeque::new(),
            frames_received: 0,
        }
    }

    /// Drop the ACKs of the next `n` frames received.
    pub fn drop_next_acks(&mut self, n: usize) {
        self.drops.extend(std::iter::repeat_n(true, n));
    }

    /// Per-frame drop plan, consumed in arrival order.
    pub fn set_drop_plan(&mut self, plan: impl IntoIterator<Item = bool>) {
        self.drops = plan.into_iter().collect();
    }

    pub fn in_contact(&self) -> bool {
        self.device.pose().z > self.pad.contact_plane_z
    }
}

impl Link for SimLink {
    fn write_all(&mut self, bytes: &[u8]) -> std::io::Result<()> {
        self.frames_received += 1;
        let drop = self.drops.pop_front().unwrap_or(false);
        let (ok, seq, clamped) = match decode_frame(bytes) {
            Ok(f) => {
                // a retransmission is acknowledged without stepping twice
                if self.device.state().last_seq != Some(f.seq) {
                    self.device
                        .step_frame(Some(f), self.dt)
                        .map_err(|e| std::io::Error::other(e.to_string()))?;
                }
                let (lo, hi) = self.device.calibration.pulse_bounds();
                (true, f.seq, f.pulses.iter().any(|p| *p == lo || *p == hi))
            }
            Err(_) => (false, bytes.get(2).copied().unwrap_or(0), false),
        };
        if !drop {
            let flags = AckFlags { in_contact: self.in_contact(), clamped, moving: self.device.state().moving };
            self.rx.extend(Ack { ok, seq, flags }.to_bytes());
        }
        Ok(())
    }

    fn read(&mut self, buf: &mut [u8], _timeout: Duration) -> std::io::Result<usize> {
        // simulated time: an empty queue is an immediate timeout
        let n = buf.len().min(self.rx.len());
        for b in buf.iter_mut().take(n) {
            *b = self.rx.pop_front().unwrap();
        }
        Ok(n)
    }

    fn backend_id(&self) -> String {
        "sim".into()
    }

    fn telemetry(&self) -> Option<JointAngles> {
        Some(self.device.angles())
    }
}

/// Joint pulses for a pose, rounded to the nearest microsecond. If that lands
/// deeper than `z_limit`, the nearest of the eight floor/ceil roundings that
/// stays at or above it is used instead, so quantization never pushes past
/// the penetration cap.
pub fn pose_to_pulses(
    geom: &DeltaGeometry,
    cal: &ServoCalibration,
    pose: &Pose,
    z_limit: f64,
) -> Result<[u16; 3], SimError> {
    let angles = inverse_kinematics(geom, pose)?;
    let (nearest, _) = angles_to_pulses(&angles, cal);
    if forward_kinematics(geom, &pulses_to_angles(&nearest, cal))?.z <= z_limit {
        return Ok(nearest);
    }
    let (lo, hi) = cal.pulse_bounds();
    let exact: Vec<f64> = (0..3).map(|i| angle_to_pulse(angles.theta[i], cal, i).us).collect();
    let mut best: Option<(f64, [u16; 3])> = None;
    for mask in 0..8u8 {
        let mut p = [0u16; 3];
        for i in 0..3 {
            let v = if mask >> i & 1 == 1 { exact[i].ceil() } else { exact[i].floor() };
            p[i] = (v as u16).clamp(lo, hi);
        }
        let Ok(q) = forward_kinematics(geom, &pulses_to_angles(&p, cal)) else {
            continue;
        };
        if q.z > z_limit {
            continue;
        }
        let d = q.distance(pose);
        if best.is_none_or(|(bd, _)| d < bd) {
            best = Some((d, p));
        }
    }
    Ok(best.map_or(nearest, |b| b.1))
}
