use alloc::string::String;
use serde::{Deserialize, Serialize};

use super::plan::{Band, ChannelPlan};
use crate::Micros;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Environment {
    Outdoor,
    Indoor,
}

impl Environment {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "outdoor" => Some(Self::Outdoor),
            "indoor" => Some(Self::Indoor),
            _ => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Outdoor => "outdoor",
            Self::Indoor => "indoor",
        }
    }
}

/// Site-local Cartesian coordinates in metres.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Position {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Position {
    pub const fn new(x: f64, y: f64, z: f64) -> Self {
        Self { x, y, z }
    }

    pub fn distance(&self, other: &Position) -> f64 {
        let (dx, dy, dz) = (self.x - other.x, self.y - other.y, self.z - other.z);
        libm::sqrt(dx * dx + dy * dy + dz * dz)
    }
}

/// Medium constants. Every field is a tunable default.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PropagationConfig {
    pub pl0_db: f64,
    pub d0_m: f64,
    pub exponent_outdoor: f64,
    pub exponent_indoor: f64,
    pub sinr_threshold_db: f64,
    pub noise_floor_dbm: f64,
    /// Half-width of the uniform noise jitter on sensing samples.
    pub noise_jitter_db: f64,
    pub ed_threshold_dbm: f64,
    pub sample_period: Micros,
}

impl Default for PropagationConfig {
    fn default() -> Self {
        Self {
            pl0_db: 40.0,
            d0_m: 1.0,
            exponent_outdoor: 2.9,
            exponent_indoor: 3.5,
            sinr_threshold_db: 6.0,
            noise_floor_dbm: -100.0,
            noise_jitter_db: 1.0,
            ed_threshold_dbm: -90.0,
            sample_period: 1_000,
        }
    }
}

impl PropagationConfig {
    pub fn exponent(&self, env: Environment) -> f64 {
        match env {
            Environment::Outdoor => self.exponent_outdoor,
            Environment::Indoor => self.exponent_indoor,
        }
    }

    /// A link between two environments uses the worse exponent.
    pub fn link_exponent(&self, a: Environment, b: Environment) -> f64 {
        libm::fmax(self.exponent(a), self.exponent(b))
    }

    /// Log-distance path loss; distances below `d0` are clamped to `d0`.
    pub fn path_loss_db(&self, distance_m: f64, exponent: f64) -> f64 {
        let d = libm::fmax(distance_m, self.d0_m);
        self.pl0_db + 10.0 * exponent * libm::log10(d / self.d0_m)
    }

    pub fn received_dbm(
        &self,
        tx_dbm: f64,
        a: (&Position, Environment),
        b: (&Position, Environment),
    ) -> f64 {
        tx_dbm - self.path_loss_db(a.0.distance(b.0), self.link_exponent(a.1, b.1))
    }
}

pub fn dbm_to_mw(dbm: f64) -> f64 {
    libm::pow(10.0, dbm / 10.0)
}

pub fn mw_to_dbm(mw: f64) -> f64 {
    10.0 * libm::log10(mw)
}

fn default_true() -> bool {
    true
}

/// One radio chip on a target node.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Transceiver {
    pub name: String,
    pub band: Band,
    /// `[low, high]` edges in Hz.
    pub band_hz: [u64; 2],
    pub channel_count: u32,
    pub channel_width_hz: u64,
    pub tx_power_dbm: f64,
    pub sensitivity_dbm: f64,
    pub airtime_us_per_byte: u64,
    #[serde(default = "default_true")]
    pub can_transmit: bool,
}

impl Transceiver {
    /// Builds a transceiver covering the full channel plan of `band`.
    pub fn new(
        name: &str,
        band: Band,
        tx_power_dbm: f64,
        sensitivity_dbm: f64,
        airtime_us_per_byte: u64,
    ) -> Self {
        let plan = ChannelPlan::for_band(band);
        let (lo, hi) = plan.span_hz();
        Self {
            name: name.into(),
            band,
            band_hz: [lo, hi],
            channel_count: plan.len(),
            channel_width_hz: plan.width_hz(),
            tx_power_dbm,
            sensitivity_dbm,
            airtime_us_per_byte,
            can_transmit: true,
        }
    }

    pub fn receive_only(mut self) -> Self {
        self.can_transmit = false;
        self
    }

    pub fn airtime(&self, payload_len: usize) -> Micros {
        self.airtime_us_per_byte * payload_len as u64
    }

    pub fn is_valid(&self) -> bool {
        self.channel_count >= 1
            && self.channel_width_hz > 0
            && self.band_hz[0] < self.band_hz[1]
            && self.tx_power_dbm.is_finite()
            && self.sensitivity_dbm.is_finite()
            && self.airtime_us_per_byte > 0
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn path_loss_at_reference_points() {
        let c = PropagationConfig::default();
        assert_eq!(c.path_loss_db(1.0, 2.9), 40.0);
        assert_eq!(c.path_loss_db(0.0, 2.9), 40.0);
        assert!((c.path_loss_db(10.0, 2.9) - 69.0).abs() < 1e-9);
        assert!((c.path_loss_db(10.0, 3.5) - 75.0).abs() < 1e-9);
    }

    #[test]
    fn worse_exponent_wins() {
        let c = PropagationConfig::default();
        assert_eq!(
            c.link_exponent(Environment::Outdoor, Environment::Indoor),
            3.5
        );
        assert_eq!(
            c.link_exponent(Environment::Outdoor, Environment::Outdoor),
            2.9
        );
    }

    #[test]
    fn unit_conversions() {
        assert!((dbm_to_mw(10.0) - 10.0).abs() < 1e-12);
        assert!((mw_to_dbm(1.0)).abs() < 1e-12);
    }
}
