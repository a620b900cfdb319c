//! The device loop: one thread owns the transport and plays trajectories
//! tick by tick. Commands arrive on an ordered queue; state leaves as
//! snapshots on a broadcast channel.

use std::sync::mpsc;
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

use deltapad_core::config::DeviceModel;
use deltapad_core::kinematics::forward_kinematics;
use deltapad_core::protocol::{pulses_to_angles, Link, Transport};
use deltapad_core::render::{Phase, Trajectory};
use deltapad_core::sim::{pose_to_pulses, SimLink, VirtualDevice};
use deltapad_core::Pose;
use serde::{Deserialize, Serialize};
use tokio::sync::{broadcast, oneshot};

use crate::config::DeviceBackend;
use crate::serial::SerialLink;

/// WebSocket snapshot rate.
pub const SNAPSHOT_HZ: f64 = 20.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeviceStateSnapshot {
    /// Seconds since the loop started (trajectory time during playback).
    pub t: f64,
    /// Joint angles in degrees.
    pub angles_deg: [f64; 3],
    pub pose: Pose,
    pub in_contact: bool,
    pub last_seq: Option<u8>,
    pub backend_id: String,
    /// Phase of the waypoint being played, if any.
    pub phase: Option<Phase>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrialEventKind {
    Presented,
    StimulusComplete,
    StimulusFailed,
    Responded,
    SessionComplete,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialEvent {
    pub session_id: String,
    pub trial: usize,
    pub event: TrialEventKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub detail: Option<String>,
}

/// Everything published on `/stream`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum StreamEvent {
    Snapshot(DeviceStateSnapshot),
    Trial(TrialEvent),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlaybackReport {
    pub waypoints: usize,
    /// Frames written, retransmissions included.
    pub frames_sent: u64,
    pub retries: u64,
    pub duration_s: f64,
    /// Ticks the device reported skin contact.
    pub contact_ticks: usize,
    pub clamped: bool,
}

#[derive(Debug, Clone, thiserror::Error, PartialEq)]
pub enum DeviceError {
    #[error("transport: {0}")]
    Transport(String),
    #[error("kinematics: {0}")]
    Kinematics(String),
    #[error("device loop has stopped")]
    Stopped,
    #[error("cannot open device: {0}")]
    Open(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Pacing {
    /// Sleep to hold the trajectory's tick rate.
    RealTime,
    /// No sleeping; simulated time only.
    AsFastAsPossible,
}

enum Command {
    Play { trajectory: Trajectory, reply: oneshot::Sender<Result<PlaybackReport, DeviceError>> },
    Shutdown,
}

/// Cheap handle to the loop thread.
#[derive(Clone)]
pub struct DeviceHandle {
    tx: mpsc::Sender<Command>,
    latest: Arc<Mutex<DeviceStateSnapshot>>,
    backend_id: String,
    thread: Arc<Mutex<Option<JoinHandle<()>>>>,
}

/// Open the link for `backend`. The simulator starts parked at the model's home pose.
pub fn open_link(backend: &DeviceBackend, model: &DeviceModel) -> Result<Box<dyn Link>, DeviceError> {
    match backend {
        DeviceBackend::Sim => {
            let dev = VirtualDevice::new(model.geometry.clone(), model.calibration.clone(), &model.workspace.home())
                .map_err(|e| DeviceError::Open(e.to_string()))?;
            let mut dev = dev.with_latency(model.servo.latency_ticks);
            dev.slew_limit = model.servo.slew_limit;
            Ok(Box::new(SimLink::new(dev, model.pad(), model.render.tick_rate)))
        }
        DeviceBackend::Serial(path) => {
            let link = SerialLink::open(&path.to_string_lossy()).map_err(|e| DeviceError::Open(e.to_string()))?;
            Ok(Box::new(link))
        }
    }
}

impl DeviceHandle {
    pub fn spawn(
        link: Box<dyn Link>,
        model: DeviceModel,
        pacing: Pacing,
        events: broadcast::Sender<StreamEvent>,
    ) -> Self {
        let backend_id = link.backend_id();
        let home = model.workspace.home();
        let initial = DeviceStateSnapshot {
            t: 0.0,
            angles_deg: link
                .telemetry()
                .or_else(|| deltapad_core::kinematics::inverse_kinematics(&model.geometry, &home).ok())
                .map(|a| a.to_degrees())
                .unwrap_or([0.0; 3]),
            pose: home,
            in_contact: false,
            last_seq: None,
            backend_id: backend_id.clone(),
            phase: None,
        };
        let latest = Arc::new(Mutex::new(initial));
        let (tx, rx) = mpsc::channel();
        let mut worker = Worker {
            transport: Transport::new(link),
            model,
            pacing,
            events,
            latest: latest.clone(),
            clock: Instant::now(),
        };
        let thread = std::thread::Builder::new()
            .name("device-loop".into())
            .spawn(move || worker.run(rx))
            .expect("spawn device loop");
        Self { tx, latest, backend_id, thread: Arc::new(Mutex::new(Some(thread))) }
    }

    pub fn backend_id(&self) -> &str {
        &self.backend_id
    }

    pub fn snapshot(&self) -> DeviceStateSnapshot {
        self.latest.lock().unwrap().clone()
    }

    /// Queue a trajectory and wait until it has been played.
    pub async fn play(&self, trajectory: Trajectory) -> Result<PlaybackReport, DeviceError> {
        let (reply, rx) = oneshot::channel();
        self.tx.send(Command::Play { trajectory, reply }).map_err(|_| DeviceError::Stopped)?;
        rx.await.map_err(|_| DeviceError::Stopped)?
    }

    /// Blocking variant for callers outside a runtime.
    pub fn play_blocking(&self, trajectory: Trajectory) -> Result<PlaybackReport, DeviceError> {
        let (reply, rx) = oneshot::channel();
        self.tx.send(Command::Play { trajectory, reply }).map_err(|_| DeviceError::Stopped)?;
        rx.blocking_recv().map_err(|_| DeviceError::Stopped)?
    }

    /// Stop the loop and wait for the thread. Later calls are no-ops.
    pub fn shutdown(&self) {
        let _ = self.tx.send(Command::Shutdown);
        if let Some(h) = self.thread.lock().unwrap().take() {
            let _ = h.join();
        }
    }
}

struct Worker {
    transport: Transport<Box<dyn Link>>,
    model: DeviceModel,
    pacing: Pacing,
    events: broadcast::Sender<StreamEvent>,
    latest: Arc<Mutex<DeviceStateSnapshot>>,
    clock: Instant,
}

impl Worker {
    fn run(&mut self, rx: mpsc::Receiver<Command>) {
        let idle = Duration::from_secs_f64(1.0 / SNAPSHOT_HZ);
        loop {
            match rx.recv_timeout(idle) {
                Ok(Command::Play { trajectory, reply }) => {
                    let r = self.play(&trajectory);
                    let _ = reply.send(r);
                }
                Ok(Command::Shutdown) | Err(mpsc::RecvTimeoutError::Disconnected) => return,
                Err(mpsc::RecvTimeoutError::Timeout) => {
                    let mut s = self.latest.lock().unwrap().clone();
                    s.t = self.clock.elapsed().as_secs_f64();
                    s.phase = None;
                    let _ = self.events.send(StreamEvent::Snapshot(s));
                }
            }
        }
    }

    fn play(&mut self, traj: &Trajectory) -> Result<PlaybackReport, DeviceError> {
        let geom = &self.model.geometry;
        let cal = &self.model.calibration;
        let every = ((traj.tick_rate / SNAPSHOT_HZ).round() as usize).max(1);
        let tick = Duration::from_secs_f64(1.0 / traj.tick_rate);
        let start = Instant::now();
        let sent_before = self.transport.frames_sent;
        let mut report = PlaybackReport {
            waypoints: traj.waypoints.len(),
            frames_sent: 0,
            retries: 0,
            duration_s: traj.total_duration,
            contact_ticks: 0,
            clamped: false,
        };
        let last = traj.waypoints.len().saturating_sub(1);
        for (k, w) in traj.waypoints.iter().enumerate() {
            let pulses = pose_to_pulses(geom, cal, &w.pose, traj.depth_limit_z)
                .map_err(|e| DeviceError::Kinematics(e.to_string()))?;
            let ack = self
                .transport
                .send(pulses, w.vibration_duty, cal)
                .map_err(|e| DeviceError::Transport(e.to_string()))?;
            report.clamped |= ack.flags.clamped;
            if ack.flags.in_contact {
                report.contact_ticks += 1;
            }
            let angles = self.transport.link().telemetry().unwrap_or_else(|| pulses_to_angles(&pulses, cal));
            let pose = forward_kinematics(geom, &angles).map_err(|e| DeviceError::Kinematics(e.to_string()))?;
            let snap = DeviceStateSnapshot {
                t: w.t,
                angles_deg: angles.to_degrees(),
                pose,
                in_contact: ack.flags.in_contact,
                last_seq: Some(ack.seq),
                backend_id: self.transport.link().backend_id(),
                phase: Some(w.phase),
            };
            *self.latest.lock().unwrap() = snap.clone();
            if k % every == 0 || k == last {
                let _ = self.events.send(StreamEvent::Snapshot(snap));
            }
            if self.pacing == Pacing::RealTime {
                let due = start + tick * (k as u32 + 1);
                let now = Instant::now();
                if due > now {
                    std::thread::sleep(due - now);
                }
            }
        }
        report.frames_sent = self.transport.frames_sent - sent_before;
        report.retries = report.frames_sent - traj.waypoints.len() as u64;
        Ok(report)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use deltapad_core::patterns::ContactPatternId;
    use deltapad_core::render::Renderer;

    fn sim_handle(model: &DeviceModel) -> (DeviceHandle, broadcast::Receiver<StreamEvent>) {
        let (tx, rx) = broadcast::channel(4096);
        let link = open_link(&DeviceBackend::Sim, model).unwrap();
        (DeviceHandle::spawn(link, model.clone(), Pacing::AsFastAsPossible, tx), rx)
    }

    #[test]
    fn plays_a_contact_trial_and_streams_at_twenty_hertz() {
        let m = DeviceModel::default();
        let (h, mut rx) = sim_handle(&m);
        let traj = Renderer::new(&m).contact_trial(ContactPatternId::C, 1.0).unwrap();
        let r = h.play_blocking(traj.clone()).unwrap();
        assert_eq!(r.waypoints, traj.waypoints.len());
        assert_eq!(r.frames_sent, traj.waypoints.len() as u64);
        assert_eq!(r.retries, 0);
        assert!(r.contact_ticks >= 50, "{}", r.contact_ticks);
        let mut snaps = Vec::new();
        while let Ok(StreamEvent::Snapshot(s)) = rx.try_recv() {
            if s.phase.is_some() {
                snaps.push(s);
            }
        }
        let expect = (traj.waypoints.len() - 1).div_ceil(5) + 1;
        assert!(snaps.len().abs_diff(expect) <= 1, "{} vs {expect}", snaps.len());
        // the stream shows the descent through hover to the contact plane
        let plane = m.workspace.contact_plane_z;
        assert!(snaps.iter().any(|s| (s.pose.z - (plane - 5.0)).abs() < 0.05));
        assert!(snaps.iter().any(|s| s.in_contact && s.pose.z > plane));
        for s in &snaps {
            let a = deltapad_core::JointAngles::new(s.angles_deg.map(f64::to_radians));
            let fk = forward_kinematics(&m.geometry, &a).unwrap();
            assert!(fk.distance(&s.pose) < 1e-9);
        }
        h.shutdown();
        h.shutdown();
    }

    #[test]
    fn stopped_loop_reports_it() {
        let m = DeviceModel::default();
        let (h, _rx) = sim_handle(&m);
        h.shutdown();
        let traj = Renderer::new(&m).contact_trial(ContactPatternId::C, 1.0).unwrap();
        assert_eq!(h.play_blocking(traj), Err(DeviceError::Stopped));
    }

    #[test]
    fn realtime_pacing_holds_the_tick() {
        let m = DeviceModel::default();
        let (tx, _rx) = broadcast::channel(4096);
        let link = open_link(&DeviceBackend::Sim, &m).unwrap();
        let h = DeviceHandle::spawn(link, m.clone(), Pacing::RealTime, tx);
        let traj = Renderer::new(&m).encounter(Pose::new(3.0, 0.0, m.workspace.contact_plane_z)).unwrap();
        let t0 = Instant::now();
        h.play_blocking(traj.clone()).unwrap();
        let wall = t0.elapsed().as_secs_f64();
        assert!(wall >= traj.total_duration, "{wall} < {}", traj.total_duration);
        h.shutdown();
    }
}
