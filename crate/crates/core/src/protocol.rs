//! Servo command encoding, the 11-byte command frame, ACKs and the
//! retrying transport over an abstract byte link.

use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::JointAngles;

pub const FRAME_LEN: usize = 11;
pub const ACK_LEN: usize = 4;
pub const MAGIC: [u8; 2] = [0xA5, 0x5A];
pub const ACK_BYTE: u8 = 0x06;
pub const NAK_BYTE: u8 = 0x15;
pub const PWM_PERIOD_US: f64 = 20_000.0;
pub const PWM_RESOLUTION: u32 = 4096;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ProtocolError {
    #[error("bad magic {0:02X} {1:02X}")]
    BadMagic(u8, u8),
    #[error("short frame: {0} bytes")]
    ShortFrame(usize),
    #[error("frame too long: {0} bytes")]
    LongFrame(usize),
    #[error("crc mismatch: got {got:02X}, expected {expected:02X}")]
    BadCrc { got: u8, expected: u8 },
    #[error("pulse {pulse} us outside [{min}, {max}]")]
    PulseOutOfRange { pulse: u16, min: u16, max: u16 },
    #[error("pulse {0} us outside the PWM period")]
    OutOfPeriod(f64),
    #[error("bad ack byte {0:02X}")]
    BadAck(u8),
    #[error("invalid calibration: {0}")]
    InvalidCalibration(String),
}

/// CRC-8, polynomial 0x07, init 0, no reflection.
pub fn crc8(data: &[u8]) -> u8 {
    static TABLE: std::sync::OnceLock<[u8; 256]> = std::sync::OnceLock::new();
    let table = TABLE.get_or_init(|| {
        let mut t = [0u8; 256];
        for (i, slot) in t.iter_mut().enumerate() {
            let mut c = i as u8;
            for _ in 0..8 {
                c = if c & 0x80 != 0 { (c << 1) ^ 0x07 } else { c << 1 };
            }
            *slot = c;
        }
        t
    });
    data.iter().fold(0u8, |crc, b| table[(crc ^ b) as usize])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ServoCalibration {
    pub pulse_min: f64,
    pub pulse_max: f64,
    /// deg
    pub angle_min: f64,
    /// deg
    pub angle_max: f64,
    /// Per-channel offset, us.
    pub trim: [f64; 3],
}

impl Default for ServoCalibration {
    fn default() -> Self {
        Self {
            pulse_min: 500.0,
            pulse_max: 2500.0,
            angle_min: -90.0,
            angle_max: 90.0,
            trim: [0.0; 3],
        }
    }
}

impl ServoCalibration {
    pub fn validate(&self) -> Result<(), ProtocolError> {
        let ok = self.pulse_min < self.pulse_max
            && self.angle_min < self.angle_max
            && self.pulse_min >= 0.0
            && self.pulse_max <= u16::MAX as f64
            && self.trim.iter().all(|t| t.is_finite());
        if ok {
            Ok(())
        } else {
            Err(ProtocolError::InvalidCalibration(format!("{self:?}")))
        }
    }

    /// us per degree
    pub fn gain(&self) -> f64 {
        (self.pulse_max - self.pulse_min) / (self.angle_max - self.angle_min)
    }

    pub fn pulse_bounds(&self) -> (u16, u16) {
        (self.pulse_min.ceil() as u16, self.pulse_max.floor() as u16)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pulse {
    pub us: f64,
    pub clamped: bool,
}

/// Linear angle→pulse map, trimmed per channel and clamped to the pulse range.
pub fn angle_to_pulse(angle: f64, cal: &ServoCalibration, channel: usize) -> Pulse {
    let deg = angle.to_degrees();
    let raw = cal.pulse_min + (deg - cal.angle_min) * cal.gain() + cal.trim[channel];
    if raw < cal.pulse_min {
        Pulse { us: cal.pulse_min, clamped: true }
    } else if raw > cal.pulse_max {
        Pulse { us: cal.pulse_max, clamped: true }
    } else {
        Pulse { us: raw, clamped: false }
    }
}

/// Inverse of [`angle_to_pulse`] inside the unclamped range, rad.
pub fn pulse_to_angle(pulse: f64, cal: &ServoCalibration, channel: usize) -> f64 {
    let deg = cal.angle_min + (pulse - cal.trim[channel] - cal.pulse_min) / cal.gain();
    deg.to_radians()
}

/// Integer wire pulses for a joint triple.
pub fn angles_to_pulses(angles: &JointAngles, cal: &ServoCalibration) -> ([u16; 3], bool) {
    let mut out = [0u16; 3];
    let mut clamped = false;
    for (i, slot) in out.iter_mut().enumerate() {
        let p = angle_to_pulse(angles.theta[i], cal, i);
        clamped |= p.clamped;
        *slot = p.us.round() as u16;
    }
    (out, clamped)
}

pub fn pulses_to_angles(pulses: &[u16; 3], cal: &ServoCalibration) -> JointAngles {
    JointAngles::new([
        pulse_to_angle(pulses[0] as f64, cal, 0),
        pulse_to_angle(pulses[1] as f64, cal, 1),
        pulse_to_angle(pulses[2] as f64, cal, 2),
    ])
}

/// PCA9685 channel setting at 50 Hz.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Pca9685Setting {
    pub pwm_frequency: u32,
    pub counts: [u16; 3],
}

pub fn pulse_to_counts(pulse: f64) -> Result<u16, ProtocolError> {
    if !(0.0..=PWM_PERIOD_US).contains(&pulse) {
        return Err(ProtocolError::OutOfPeriod(pulse));
    }
    let counts = (pulse * PWM_RESOLUTION as f64 / PWM_PERIOD_US).round() as u32;
    Ok(counts.min(PWM_RESOLUTION - 1) as u16)
}

pub fn counts_to_pulse(counts: u16) -> f64 {
    counts as f64 * PWM_PERIOD_US / PWM_RESOLUTION as f64
}

impl Pca9685Setting {
    pub fn from_pulses(pulses: &[u16; 3]) -> Result<Self, ProtocolError> {
        let mut counts = [0u16; 3];
        for (c, p) in counts.iter_mut().zip(pulses) {
            *c = pulse_to_counts(*p as f64)?;
        }
        Ok(Self { pwm_frequency: 50, counts })
    }
}

pub fn duty_to_byte(duty: f64) -> u8 {
    (duty.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn byte_to_duty(b: u8) -> f64 {
    b as f64 / 255.0
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Frame {
    pub seq: u8,
    pub pulses: [u16; 3],
    pub duty: u8,
}

impl Frame {
    pub fn to_bytes(&self) -> [u8; FRAME_LEN] {
        let mut b = [0u8; FRAME_LEN];
        b[0..2].copy_from_slice(&MAGIC);
        b[2] = self.seq;
        for (i, p) in self.pulses.iter().enumerate() {
            b[3 + 2 * i..5 + 2 * i].copy_from_slice(&p.to_le_bytes());
        }
        b[9] = self.duty;
        b[10] = crc8(&b[2..10]);
        b
    }
}

pub fn encode_frame(pulses: [u16; 3], duty: f64, seq: u8, cal: &ServoCalibration) -> Result<[u8; FRAME_LEN], ProtocolError> {
    let (min, max) = cal.pulse_bounds();
    if let Some(&pulse) = pulses.iter().find(|p| **p < min || **p > max) {
        return Err(ProtocolError::PulseOutOfRange { pulse, min, max });
    }
    Ok(Frame { seq, pulses, duty: duty_to_byte(duty) }.to_bytes())
}

pub fn decode_frame(bytes: &[u8]) -> Result<Frame, ProtocolError> {
    if bytes.len() < FRAME_LEN {
        return Err(ProtocolError::ShortFrame(bytes.len()));
    }
    if bytes.len() > FRAME_LEN {
        return Err(ProtocolError::LongFrame(bytes.len()));
    }
    if bytes[0..2] != MAGIC {
        return Err(ProtocolError::BadMagic(bytes[0], bytes[1]));
    }
    let expected = crc8(&bytes[2..10]);
    if bytes[10] != expected {
        return Err(ProtocolError::BadCrc { got: bytes[10], expected });
    }
    let pulse = |i: usize| u16::from_le_bytes([bytes[3 + 2 * i], bytes[4 + 2 * i]]);
    Ok(Frame {
        seq: bytes[2],
        pulses: [pulse(0), pulse(1), pulse(2)],
        duty: bytes[9],
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct AckFlags {
    pub in_contact: bool,
    pub clamped: bool,
    pub moving: bool,
}

impl AckFlags {
    pub fn to_byte(self) -> u8 {
        self.in_contact as u8 | (self.clamped as u8) << 1 | (self.moving as u8) << 2
    }

    pub fn from_byte(b: u8) -> Self {
        Self {
            in_contact: b & 1 != 0,
            clamped: b & 2 != 0,
            moving: b & 4 != 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Ack {
    pub ok: bool,
    pub seq: u8,
    pub flags: AckFlags,
}

impl Ack {
    pub fn to_bytes(&self) -> [u8; ACK_LEN] {
        let mut b = [if self.ok { ACK_BYTE } else { NAK_BYTE }, self.seq, self.flags.to_byte(), 0];
        b[3] = crc8(&b[0..3]);
        b
    }

    pub fn from_bytes(b: &[u8]) -> Result<Self, ProtocolError> {
        if b.len() < ACK_LEN {
            return Err(ProtocolError::ShortFrame(b.len()));
        }
        let expected = crc8(&b[0..3]);
        if b[3] != expected {
            return Err(ProtocolError::BadCrc { got: b[3], expected });
        }
        let ok = match b[0] {
            ACK_BYTE => true,
            NAK_BYTE => false,
            other => return Err(ProtocolError::BadAck(other)),
        };
        Ok(Self { ok, seq: b[1], flags: AckFlags::from_byte(b[2]) })
    }
}

/// Ordered, possibly lossy byte stream to the device.
pub trait Link: Send {
    fn write_all(&mut self, bytes: &[u8]) -> std::io::Result<()>;
    /// Read up to `buf.len()` bytes, waiting at most `timeout`. `Ok(0)` means
    /// nothing arrived in time.
    fn read(&mut self, buf: &mut [u8], timeout: Duration) -> std::io::Result<usize>;
    fn backend_id(&self) -> String;
    /// Measured joint angles, if the backend can report them.
    fn telemetry(&self) -> Option<JointAngles> {
        None
    }
}

impl<L: Link + ?Sized> Link for Box<L> {
    fn write_all(&mut self, bytes: &[u8]) -> std::io::Result<()> {
        (**self).write_all(bytes)
    }

    fn read(&mut self, buf: &mut [u8], timeout: Duration) -> std::io::Result<usize> {
        (**self).read(buf, timeout)
    }

    fn backend_id(&self) -> String {
        (**self).backend_id()
    }

    fn telemetry(&self) -> Option<JointAngles> {
        (**self).telemetry()
    }
}

#[derive(Debug, Error)]
pub enum TransportError {
    #[error("device did not acknowledge frame {seq}")]
    DeviceTimeout { seq: u8 },
    #[error("device rejected frame {seq}")]
    NackedFrame { seq: u8 },
    #[error(transparent)]
    Protocol(#[from] ProtocolError),
    #[error("link i/o: {0}")]
    Io(#[from] std::io::Error),
}

/// Frame sender with sequence numbering and a single retry.
pub struct Transport<L: Link> {
    link: L,
    pub timeout: Duration,
    pub retries: u32,
    next_seq: u8,
    pub frames_sent: u64,
}

impl<L: Link> Transport<L> {
    pub fn new(link: L) -> Self {
        Self {
            link,
            timeout: Duration::from_millis(20),
            retries: 1,
            next_seq: 0,
            frames_sent: 0,
        }
    }

    pub fn link(&self) -> &L {
        &self.link
    }

    pub fn link_mut(&mut self) -> &mut L {
        &mut self.link
    }

    pub fn next_seq(&self) -> u8 {
        self.next_seq
    }

    /// Send pulses and duty, waiting for the matching ACK.
    pub fn send(&mut self, pulses: [u16; 3], duty: f64, cal: &ServoCalibration) -> Result<Ack, TransportError> {
        let seq = self.next_seq;
        self.next_seq = self.next_seq.wrapping_add(1);
        let bytes = encode_frame(pulses, duty, seq, cal)?;
        for _ in 0..=self.retries {
            self.link.write_all(&bytes)?;
            self.frames_sent += 1;
            if let Some(ack) = self.await_ack(seq)? {
                if !ack.ok {
                    return Err(TransportError::NackedFrame { seq });
                }
                return Ok(ack);
            }
        }
        Err(TransportError::DeviceTimeout { seq })
    }

    fn await_ack(&mut self, seq: u8) -> Result<Option<Ack>, TransportError> {
        let mut buf = [0u8; ACK_LEN];
        loop {
            let mut filled = 0;
            while filled < ACK_LEN {
                let n = self.link.read(&mut buf[filled..], self.timeout)?;
                if n == 0 {
                    return Ok(None);
                }
                filled += n;
            }
            match Ack::from_bytes(&buf) {
                // stale ACKs from an earlier retry are skipped
                Ok(ack) if ack.seq == seq => return Ok(Some(ack)),
                Ok(_) => continue,
                Err(_) => return Ok(None),
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::VecDeque;

    #[test]
    fn angle_map_points() {
        let cal = ServoCalibration::default();
        assert_eq!(angle_to_pulse(0.0, &cal, 0).us, 1500.0);
        assert!((angle_to_pulse(90f64.to_radians(), &cal, 0).us - 2500.0).abs() < 1e-9);
        assert!((angle_to_pulse(45f64.to_radians(), &cal, 1).us - 2000.0).abs() < 1e-9);
        let over = angle_to_pulse(120f64.to_radians(), &cal, 2);
        assert!(over.clamped && over.us == 2500.0);
    }

    #[test]
    fn trim_shifts_pulse() {
        let cal = ServoCalibration { trim: [10.0, 0.0, -5.0], ..Default::default() };
        assert_eq!(angle_to_pulse(0.0, &cal, 0).us, 1510.0);
        assert_eq!(angle_to_pulse(0.0, &cal, 2).us, 1495.0);
        assert!((pulse_to_angle(1510.0, &cal, 0)).abs() < 1e-12);
    }

    #[test]
    fn counts() {
        assert_eq!(pulse_to_counts(0.0).unwrap(), 0);
        assert_eq!(pulse_to_counts(1500.0).unwrap(), 307);
        assert_eq!(pulse_to_counts(2500.0).unwrap(), 512);
        assert!(matches!(pulse_to_counts(20_001.0), Err(ProtocolError::OutOfPeriod(_))));
        assert!(matches!(pulse_to_counts(-1.0), Err(ProtocolError::OutOfPeriod(_))));
    }

    #[test]
    fn frame_round_trip_and_errors() {
        let cal = ServoCalibration::default();
        let bytes = encode_frame([1500, 900, 2100], 1.0, 7, &cal).unwrap();
        assert_eq!(bytes[9], 255);
        let f = decode_frame(&bytes).unwrap();
        assert_eq!(f, Frame { seq: 7, pulses: [1500, 900, 2100], duty: 255 });
        assert_eq!(decode_frame(&bytes[..10]), Err(ProtocolError::ShortFrame(10)));
        assert!(matches!(encode_frame([400, 1500, 1500], 0.0, 0, &cal), Err(ProtocolError::PulseOutOfRange { .. })));
    }

    #[test]
    fn ack_round_trip() {
        let a = Ack { ok: true, seq: 200, flags: AckFlags { in_contact: true, clamped: false, moving: true } };
        assert_eq!(Ack::from_bytes(&a.to_bytes()).unwrap(), a);
        let mut bad = a.to_bytes();
        bad[2] ^= 1;
        assert!(Ack::from_bytes(&bad).is_err());
    }

    /// Replies to each frame from a script: `true` ack, `false` drop.
    struct Scripted {
        script: VecDeque<Option<bool>>,
        rx: VecDeque<u8>,
        writes: usize,
    }

    impl Link for Scripted {
        fn write_all(&mut self, bytes: &[u8]) -> std::io::Result<()> {
            self.writes += 1;
            let f = decode_frame(bytes).unwrap();
            if let Some(ok) = self.script.pop_front().flatten() { self.rx.extend(Ack { ok, seq: f.seq, flags: AckFlags::default() }.to_bytes()) }
            Ok(())
        }
        fn read(&mut self, buf: &mut [u8], _t: Duration) -> std::io::Result<usize> {
            let n = buf.len().min(self.rx.len());
            for b in buf.iter_mut().take(n) {
                *b = self.rx.pop_front().unwrap();
            }
            Ok(n)
        }
        fn backend_id(&self) -> String {
            "scripted".into()
        }
    }

    fn transport(script: &[Option<bool>]) -> Transport<Scripted> {
        Transport::new(Scripted { script: script.iter().copied().collect(), rx: VecDeque::new(), writes: 0 })
    }

    #[test]
    fn retry_contract() {
        let cal = ServoCalibration::default();
        let mut t = transport(&[None, Some(true)]);
        assert_eq!(t.send([1500; 3], 0.0, &cal).unwrap().seq, 0);
        assert_eq!(t.link().writes, 2);

        let mut t = transport(&[None, None]);
        assert!(matches!(t.send([1500; 3], 0.0, &cal), Err(TransportError::DeviceTimeout { seq: 0 })));
        assert_eq!(t.link().writes, 2);

        let mut t = transport(&[Some(false)]);
        assert!(matches!(t.send([1500; 3], 0.0, &cal), Err(TransportError::NackedFrame { seq: 0 })));
    }
}
