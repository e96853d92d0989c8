//! Deterministic synthetic CAN traffic with DoS, fuzzing and RPM-spoof
//! injectors.
//!
//! All internal timekeeping is in integer microseconds so that generated
//! captures survive a text round trip unchanged. Output is a pure function
//! of the profile, the schedules and their seeds.

use std::collections::HashSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp};
use thiserror::Error;

use crate::can::{CanFrame, Label, MAX_STD_ID};

/// CAN id the RPM message uses in the reference vehicle.
pub const RPM_ID: u16 = 0x316;

#[derive(Debug, Error, PartialEq)]
pub enum SimError {
    #[error("benign profile has no messages")]
    EmptyProfile,
    #[error("invalid profile: {0}")]
    InvalidProfile(String),
    #[error("invalid attack schedule: {0}")]
    InvalidSchedule(String),
    #[error("schedule is for {got}, injector expects {expected}")]
    WrongClass { expected: Label, got: Label },
    #[error("spoof target 0x{0:03x} does not appear in the benign stream")]
    UnknownTarget(u16),
}

/// A periodic message broadcast by some ECU.
#[derive(Debug, Clone, PartialEq)]
pub struct MessageDef {
    pub can_id: u16,
    /// Seconds between transmissions.
    pub period: f64,
    /// Phase offset of the first transmission, seconds.
    pub offset: f64,
    pub dlc: u8,
    /// Byte positions holding a rolling counter.
    pub counter_bytes: Vec<usize>,
    /// Byte positions holding a slowly drifting sensor value.
    pub sensor_bytes: Vec<usize>,
    /// Largest per-frame step of a sensor byte.
    pub max_step: u8,
}

impl MessageDef {
    pub fn periodic(can_id: u16, period: f64) -> Self {
        MessageDef {
            can_id,
            period,
            offset: 0.0,
            dlc: 8,
            counter_bytes: Vec::new(),
            sensor_bytes: Vec::new(),
            max_step: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenignProfile {
    pub messages: Vec<MessageDef>,
    pub seed: u64,
    /// Timestamp of the first frame, seconds.
    pub start_time: f64,
}

impl BenignProfile {
    pub fn new(messages: Vec<MessageDef>, seed: u64) -> Self {
        BenignProfile {
            messages,
            seed,
            start_time: 0.0,
        }
    }

    /// A vehicle-like mix of 20 ECUs broadcasting at 10 to 100 ms, 1540
    /// frames per second in total, with the RPM message on 0x316.
    pub fn vehicle(seed: u64) -> Self {
        // (id, period ms, counters, sensors)
        let table: [(u16, u64, &[usize], &[usize]); 20] = [
            (0x002, 10, &[6], &[0, 1]),
            (0x0a0, 100, &[], &[2, 3]),
            (0x0a1, 100, &[], &[0]),
            (0x130, 10, &[7], &[0, 1, 2]),
            (0x140, 10, &[7], &[3, 4]),
            (0x153, 10, &[], &[1, 2]),
            (0x18f, 10, &[], &[0, 3]),
            (0x1f1, 20, &[], &[4]),
            (0x260, 10, &[6], &[2]),
            (0x2a0, 10, &[], &[5, 6]),
            (0x2c0, 20, &[], &[0]),
            (0x316, 10, &[], &[2, 3]),
            (0x329, 10, &[7], &[1]),
            (0x350, 20, &[], &[2]),
            (0x370, 10, &[], &[1, 2]),
            (0x43f, 10, &[], &[0, 5]),
            (0x440, 10, &[], &[3]),
            (0x4b1, 20, &[], &[0, 4]),
            (0x545, 10, &[], &[1]),
            (0x5f0, 50, &[], &[6]),
        ];
        let messages = table
            .iter()
            .enumerate()
            .map(|(i, &(id, ms, counters, sensors))| MessageDef {
                can_id: id,
                period: ms as f64 / 1000.0,
                offset: (i as f64 * 0.37e-3) % (ms as f64 / 1000.0),
                dlc: 8,
                counter_bytes: counters.to_vec(),
                sensor_bytes: sensors.to_vec(),
                max_step: 3,
            })
            .collect();
        BenignProfile::new(messages, seed)
    }

    pub fn validate(&self) -> Result<(), SimError> {
        if self.messages.is_empty() {
            return Err(SimError::EmptyProfile);
        }
        let mut seen = HashSet::new();
        for m in &self.messages {
            if m.can_id >= MAX_STD_ID {
                return Err(SimError::InvalidProfile(format!("id 0x{:x} is not 11-bit", m.can_id)));
            }
            if !seen.insert(m.can_id) {
                return Err(SimError::InvalidProfile(format!("duplicate id 0x{:x}", m.can_id)));
            }
            if !(m.period > 0.0) || to_micros(m.period) == 0 {
                return Err(SimError::InvalidProfile(format!(
                    "id 0x{:x}: period must be at least 1 us",
                    m.can_id
                )));
            }
            if !(m.offset >= 0.0) {
                return Err(SimError::InvalidProfile(format!("id 0x{:x}: negative offset", m.can_id)));
            }
            if m.dlc > 8 {
                return Err(SimError::InvalidProfile(format!("id 0x{:x}: dlc > 8", m.can_id)));
            }
            if let Some(&p) = m
                .counter_bytes
                .iter()
                .chain(&m.sensor_bytes)
                .find(|&&p| p >= m.dlc as usize)
            {
                return Err(SimError::InvalidProfile(format!(
                    "id 0x{:x}: byte position {} outside dlc {}",
                    m.can_id, p, m.dlc
                )));
            }
        }
        if !self.start_time.is_finite() || self.start_time < 0.0 {
            return Err(SimError::InvalidProfile("start time must be >= 0".into()));
        }
        Ok(())
    }

    pub fn ids(&self) -> impl Iterator<Item = u16> + '_ {
        self.messages.iter().map(|m| m.can_id)
    }
}

/// Attack-specific parameters; each injector reads only its own fields.
#[derive(Debug, Clone, PartialEq)]
pub struct AttackParams {
    pub dos_id: u16,
    pub spoof_target: u16,
    pub spoof_payload: [u8; 8],
}

impl Default for AttackParams {
    fn default() -> Self {
        AttackParams {
            dos_id: 0x000,
            spoof_target: RPM_ID,
            spoof_payload: [0x00, 0x00, 0xff, 0xff, 0x00, 0x00, 0x00, 0x00],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttackSchedule {
    pub class: Label,
    /// Seconds, same clock as the stream.
    pub start: f64,
    pub stop: f64,
    /// Injected frames per second (mean rate for fuzzing).
    pub intensity: f64,
    pub seed: u64,
    pub params: AttackParams,
}

impl AttackSchedule {
    pub fn new(class: Label, start: f64, stop: f64, intensity: f64, seed: u64) -> Self {
        AttackSchedule {
            class,
            start,
            stop,
            intensity,
            seed,
            params: AttackParams::default(),
        }
    }

    /// Default rate for each attack: DoS 2000/s, fuzzing 1000/s mean,
    /// RPM spoof 1000/s. These are tuning knobs, not measured values.
    pub fn default_intensity(class: Label) -> f64 {
        match class {
            Label::DoS => 2000.0,
            Label::Fuzzing => 1000.0,
            Label::SpoofRpm => 1000.0,
            Label::Benign => 0.0,
        }
    }

    pub fn validate(&self) -> Result<(), SimError> {
        if !(self.start.is_finite() && self.stop.is_finite()) || self.start < 0.0 {
            return Err(SimError::InvalidSchedule("start/stop must be finite and >= 0".into()));
        }
        if !(self.start < self.stop) {
            return Err(SimError::InvalidSchedule(format!(
                "start {} must precede stop {}",
                self.start, self.stop
            )));
        }
        if !(self.intensity > 0.0) || !self.intensity.is_finite() {
            return Err(SimError::InvalidSchedule(format!(
                "intensity must be positive, got {}",
                self.intensity
            )));
        }
        if self.class == Label::Benign {
            return Err(SimError::InvalidSchedule("benign is not an attack".into()));
        }
        Ok(())
    }

    fn expect(&self, class: Label) -> Result<(), SimError> {
        if self.class != class {
            return Err(SimError::WrongClass {
                expected: class,
                got: self.class,
            });
        }
        self.validate()
    }
}

fn to_micros(seconds: f64) -> u64 {
    (seconds * 1e6).round() as u64
}

fn from_micros(us: u64) -> f64 {
    us as f64 / 1e6
}

fn message_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Generates `duration` seconds of benign periodic traffic.
pub fn gen_benign(profile: &BenignProfile, duration: f64) -> Result<Vec<CanFrame>, SimError> {
    profile.validate()?;
    if !(duration >= 0.0) || !duration.is_finite() {
        return Err(SimError::InvalidProfile(format!("bad duration {duration}")));
    }
    let base = to_micros(profile.start_time);
    let end = to_micros(duration);

    // (time, profile index, frame)
    let mut tagged: Vec<(u64, usize, CanFrame)> = Vec::new();
    for (idx, msg) in profile.messages.iter().enumerate() {
        let period = to_micros(msg.period);
        let mut rng = message_rng(profile.seed, msg.can_id as u64 + 1);
        let mut payload = [0u8; 8];
        rng.fill(&mut payload[..msg.dlc as usize]);
        let mut t = to_micros(msg.offset);
        while t < end {
            for &p in &msg.counter_bytes {
                payload[p] = payload[p].wrapping_add(1);
            }
            for &p in &msg.sensor_bytes {
                let step = msg.max_step as i16;
                let delta = if step > 0 { rng.random_range(-step..=step) } else { 0 };
                payload[p] = (payload[p] as i16 + delta).clamp(0, 255) as u8;
            }
            let frame = CanFrame::new(from_micros(base + t), msg.can_id, msg.dlc, payload, Label::Benign)
                .expect("profile validated");
            tagged.push((t, idx, frame));
            t += period;
        }
    }
    tagged.sort_by_key(|&(t, idx, _)| (t, idx));
    Ok(tagged.into_iter().map(|(_, _, f)| f).collect())
}

/// Merges two timestamp-sorted streams. On equal timestamps frames from
/// `base` come first.
pub fn merge_streams(base: &[CanFrame], injected: &[CanFrame]) -> Vec<CanFrame> {
    let mut out = Vec::with_capacity(base.len() + injected.len());
    let (mut i, mut j) = (0, 0);
    while i < base.len() && j < injected.len() {
        if injected[j].timestamp < base[i].timestamp {
            out.push(injected[j]);
            j += 1;
        } else {
            out.push(base[i]);
            i += 1;
        }
    }
    out.extend_from_slice(&base[i..]);
    out.extend_from_slice(&injected[j..]);
    out
}

/// Restricts the schedule window to the span of a non-empty stream,
/// returning the window in microseconds.
fn effective_window(stream: &[CanFrame], schedule: &AttackSchedule) -> Option<(u64, u64)> {
    let (mut start, mut stop) = (to_micros(schedule.start), to_micros(schedule.stop));
    if let (Some(first), Some(last)) = (stream.first(), stream.last()) {
        let (lo, hi) = (to_micros(first.timestamp), to_micros(last.timestamp));
        if start < lo || stop > hi {
            log::warn!(
                "{} schedule [{}, {}] extends outside stream [{}, {}]; injecting partially",
                schedule.class,
                schedule.start,
                schedule.stop,
                first.timestamp,
                last.timestamp
            );
            start = start.max(lo);
            stop = stop.min(hi);
        }
    }
    (start < stop).then_some((start, stop))
}

fn periodic_frames(
    window: Option<(u64, u64)>,
    schedule: &AttackSchedule,
    make: impl Fn(f64) -> CanFrame,
) -> Vec<CanFrame> {
    let Some((start, stop)) = window else {
        return Vec::new();
    };
    let rate = schedule.intensity;
    let count = ((stop - start) as f64 / 1e6 * rate).round() as u64;
    (0..count)
        .map(|i| start + (i as f64 * 1e6 / rate).round() as u64)
        .filter(|&t| t < stop)
        .map(|t| make(from_micros(t)))
        .collect()
}

/// Floods the bus with all-zero frames on the dominant identifier.
pub fn inject_dos(stream: &[CanFrame], schedule: &AttackSchedule) -> Result<Vec<CanFrame>, SimError> {
    schedule.expect(Label::DoS)?;
    let id = schedule.params.dos_id;
    if id >= MAX_STD_ID {
        return Err(SimError::InvalidSchedule(format!("DoS id 0x{id:x} not 11-bit")));
    }
    let window = effective_window(stream, schedule);
    let injected = periodic_frames(window, schedule, |t| {
        CanFrame::new(t, id, 8, [0; 8], Label::DoS).expect("valid id")
    });
    Ok(merge_streams(stream, &injected))
}

/// Injects frames with uniformly random ids and payloads at exponential
/// inter-arrival times.
pub fn inject_fuzzing(
    stream: &[CanFrame],
    schedule: &AttackSchedule,
) -> Result<Vec<CanFrame>, SimError> {
    schedule.expect(Label::Fuzzing)?;
    let mut injected = Vec::new();
    if let Some((start, stop)) = effective_window(stream, schedule) {
        let mut rng = ChaCha8Rng::seed_from_u64(schedule.seed);
        let gaps = Exp::new(schedule.intensity)
            .map_err(|e| SimError::InvalidSchedule(e.to_string()))?;
        let mut t = start as f64 / 1e6;
        loop {
            t += gaps.sample(&mut rng);
            let us = to_micros(t);
            if us >= stop {
                break;
            }
            let id = rng.random_range(0..MAX_STD_ID);
            let payload: [u8; 8] = rng.random();
            injected.push(CanFrame::new(from_micros(us), id, 8, payload, Label::Fuzzing).expect("valid id"));
        }
    }
    Ok(merge_streams(stream, &injected))
}

/// Impersonates an existing identifier with a fixed forged payload at a
/// fixed short period.
pub fn inject_spoof(
    stream: &[CanFrame],
    schedule: &AttackSchedule,
) -> Result<Vec<CanFrame>, SimError> {
    schedule.expect(Label::SpoofRpm)?;
    let target = schedule.params.spoof_target;
    if !stream.iter().any(|f| f.can_id == target && f.label == Label::Benign) {
        return Err(SimError::UnknownTarget(target));
    }
    let payload = schedule.params.spoof_payload;
    let window = effective_window(stream, schedule);
    let injected = periodic_frames(window, schedule, |t| {
        CanFrame::new(t, target, 8, payload, Label::SpoofRpm).expect("target seen in stream")
    });
    Ok(merge_streams(stream, &injected))
}

/// Dispatches to the injector for `schedule.class`.
pub fn inject(stream: &[CanFrame], schedule: &AttackSchedule) -> Result<Vec<CanFrame>, SimError> {
    match schedule.class {
        Label::DoS => inject_dos(stream, schedule),
        Label::Fuzzing => inject_fuzzing(stream, schedule),
        Label::SpoofRpm => inject_spoof(stream, schedule),
        Label::Benign => Err(SimError::InvalidSchedule("benign is not an attack".into())),
    }
}

/// Benign traffic plus any number of attack windows.
#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    pub profile: BenignProfile,
    pub duration: f64,
    pub schedules: Vec<AttackSchedule>,
}

impl Scenario {
    /// A single-attack capture in the style of the public dataset: the
    /// attack runs in bursts of `burst` seconds separated by benign gaps of
    /// the same length, starting and ending with a gap.
    pub fn bursty(class: Label, duration: f64, burst: f64, seed: u64) -> Self {
        let profile = BenignProfile::vehicle(seed);
        let mut schedules = Vec::new();
        if class.is_attack() {
            let mut start = burst;
            let mut k = 0u64;
            while start + 2.0 * burst <= duration {
                schedules.push(AttackSchedule::new(
                    class,
                    start,
                    start + burst,
                    AttackSchedule::default_intensity(class),
                    seed.wrapping_mul(31).wrapping_add(k + 1),
                ));
                start += 2.0 * burst;
                k += 1;
            }
        }
        Scenario {
            profile,
            duration,
            schedules,
        }
    }

    pub fn generate(&self) -> Result<Vec<CanFrame>, SimError> {
        let mut stream = gen_benign(&self.profile, self.duration)?;
        for s in &self.schedules {
            stream = inject(&stream, s)?;
        }
        Ok(stream)
    }
}
