use rand_chacha::ChaCha8Rng;
use rand_core::{RngCore, SeedableRng};
use serde::{Deserialize, Serialize};

use super::plan::Band;
use super::propagation::{Environment, Position};
use crate::{Micros, MS};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InterfererKind {
    /// On for the first `duty` fraction of every period.
    PeriodicDutyCycle,
    /// Each period slot is independently on with probability `duty`.
    RandomOnOff,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InterfererChannel {
    Fixed(u32),
    /// Hops `first..=last`, dwelling `dwell_ms` on each channel.
    Sweep {
        first: u32,
        last: u32,
        dwell_ms: u32,
    },
}

impl InterfererChannel {
    pub fn at(&self, t: Micros) -> u32 {
        match *self {
            InterfererChannel::Fixed(c) => c,
            InterfererChannel::Sweep {
                first,
                last,
                dwell_ms,
            } => {
                let span = (last.saturating_sub(first) + 1) as u64;
                let dwell = (dwell_ms as u64 * MS).max(1);
                first + ((t / dwell) % span) as u32
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InterfererProfile {
    pub kind: InterfererKind,
    pub band: Band,
    pub channel: InterfererChannel,
    pub duty: f64,
    pub period_ms: u32,
    pub power_dbm: f64,
    pub position: Position,
    #[serde(default = "outdoor")]
    pub environment: Environment,
}

fn outdoor() -> Environment {
    Environment::Outdoor
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, thiserror::Error)]
pub enum InterfererError {
    #[error("duty must lie in [0, 1]")]
    Duty,
    #[error("period must be positive")]
    Period,
    #[error("power must be finite")]
    Power,
    #[error("sweep range is empty")]
    Sweep,
}

impl InterfererProfile {
    pub fn validate(&self) -> Result<(), InterfererError> {
        if !(0.0..=1.0).contains(&self.duty) {
            return Err(InterfererError::Duty);
        }
        if self.period_ms == 0 {
            return Err(InterfererError::Period);
        }
        if !self.power_dbm.is_finite() {
            return Err(InterfererError::Power);
        }
        if let InterfererChannel::Sweep { first, last, .. } = self.channel {
            if first > last {
                return Err(InterfererError::Sweep);
            }
        }
        Ok(())
    }

    /// A jammer that never switches off.
    pub fn continuous(band: Band, channel: u32, power_dbm: f64, position: Position) -> Self {
        Self {
            kind: InterfererKind::PeriodicDutyCycle,
            band,
            channel: InterfererChannel::Fixed(channel),
            duty: 1.0,
            period_ms: 100,
            power_dbm,
            position,
            environment: Environment::Outdoor,
        }
    }

    fn period(&self) -> Micros {
        self.period_ms as u64 * MS
    }
}

/// An interferer placed in a medium, with its own random stream.
#[derive(Debug, Clone)]
pub(crate) struct Interferer {
    pub profile: InterfererProfile,
    seed: u64,
    stream: u64,
}

impl Interferer {
    pub fn new(profile: InterfererProfile, seed: u64, stream: u64) -> Self {
        Self {
            profile,
            seed,
            stream,
        }
    }

    fn slot_on(&self, slot: u64) -> bool {
        let p = &self.profile;
        if p.duty >= 1.0 {
            return true;
        }
        if p.duty <= 0.0 {
            return false;
        }
        match p.kind {
            InterfererKind::PeriodicDutyCycle => true,
            InterfererKind::RandomOnOff => unit(self.seed, self.stream, slot) < p.duty,
        }
    }

    /// Whether the interferer radiates on `channel` at instant `t`.
    pub fn active_at(&self, band: Band, channel: u32, t: Micros) -> bool {
        let p = &self.profile;
        if p.band != band || p.channel.at(t) != channel || p.duty <= 0.0 {
            return false;
        }
        let period = p.period();
        match p.kind {
            InterfererKind::PeriodicDutyCycle => {
                let on = libm::round(p.duty * period as f64) as u64;
                t % period < on
            }
            InterfererKind::RandomOnOff => self.slot_on(t / period),
        }
    }

    /// Whether the interferer radiates on `channel` at any instant of `[a, b)`.
    pub fn active_during(&self, band: Band, channel: u32, a: Micros, b: Micros) -> bool {
        if b <= a {
            return false;
        }
        let p = &self.profile;
        if p.band != band || p.duty <= 0.0 {
            return false;
        }
        // the state only changes at period and dwell boundaries
        let period = p.period();
        let dwell = match p.channel {
            InterfererChannel::Fixed(_) => period,
            InterfererChannel::Sweep { dwell_ms, .. } => (dwell_ms as u64 * MS).max(1),
        };
        let mut t = a;
        let mut iterations = 0u32;
        while t < b {
            if self.active_at(band, channel, t) {
                return true;
            }
            // next candidate: start of the next period or dwell slot
            let next_period = (t / period + 1) * period;
            let next_dwell = (t / dwell + 1) * dwell;
            t = next_period.min(next_dwell);
            iterations += 1;
            if iterations > 1_000_000 {
                break;
            }
        }
        false
    }
}

/// Uniform `[0, 1)` from a counter-addressed ChaCha stream.
pub(crate) fn unit(seed: u64, stream: u64, index: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng.set_word_pos(index as u128 * 2);
    (rng.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}
