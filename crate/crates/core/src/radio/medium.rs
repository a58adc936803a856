use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;
use serde::{Deserialize, Serialize};

use super::interferer::{unit, Interferer, InterfererError, InterfererProfile};
use super::plan::Band;
use super::propagation::{
    dbm_to_mw, mw_to_dbm, Environment, Position, PropagationConfig, Transceiver,
};
use super::sensing::{PsdSample, SenseResult, SpectrumLog};
use crate::digest::fnv1a64;
use crate::Micros;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct NodeId(pub u32);

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct TxId(pub u64);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeSpec {
    pub name: String,
    pub position: Position,
    pub environment: Environment,
    pub radios: Vec<Transceiver>,
    /// Fault injection: corrupts every frame this node sends or receives.
    #[serde(default)]
    pub faulty: bool,
}

impl NodeSpec {
    pub fn radio(&self, band: Band) -> Option<&Transceiver> {
        self.radios.iter().find(|r| r.band == band)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Transmission {
    pub id: TxId,
    pub node: NodeId,
    pub band: Band,
    pub channel: u32,
    pub start: Micros,
    pub end: Micros,
    pub power_dbm: f64,
    pub payload: Vec<u8>,
}

impl Transmission {
    pub fn active_at(&self, t: Micros) -> bool {
        self.start <= t && t < self.end
    }

    pub fn overlaps(&self, a: Micros, b: Micros) -> bool {
        self.start < b && a < self.end
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Reception {
    Delivered(Vec<u8>),
    BelowSensitivity {
        rx_dbm: f64,
    },
    Collision {
        rx_dbm: f64,
        sinr_db: f64,
    },
    /// The receiver has no radio in the frame's band.
    NoRadio,
}

impl Reception {
    pub fn payload(&self) -> Option<&[u8]> {
        match self {
            Reception::Delivered(p) => Some(p),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum RadioError {
    #[error("unknown node {0:?}")]
    UnknownNode(NodeId),
    #[error("node has no {0:?} radio")]
    NoRadio(Band),
    #[error("channel {channel} is not supported in {band:?}")]
    UnsupportedChannel { band: Band, channel: u32 },
    #[error("radio cannot transmit")]
    ReceiveOnly,
    #[error("power {0} dBm outside radio limits")]
    PowerOutOfRange(f64),
    #[error("empty payload")]
    EmptyPayload,
    #[error("unknown transmission")]
    UnknownTransmission,
    #[error("invalid interferer: {0}")]
    Interferer(#[from] InterfererError),
}

/// Lowest power any radio will put on air.
pub const MIN_TX_POWER_DBM: f64 = -30.0;

/// The shared radio medium: nodes, their transmissions and interferers.
/// Randomness comes only from `seed`.
#[derive(Debug, Clone)]
pub struct Medium {
    cfg: PropagationConfig,
    seed: u64,
    nodes: Vec<NodeSpec>,
    interferers: Vec<Interferer>,
    txs: Vec<Transmission>,
    next_tx: u64,
}

impl Medium {
    pub fn new(cfg: PropagationConfig, seed: u64) -> Self {
        Self {
            cfg,
            seed,
            nodes: Vec::new(),
            interferers: Vec::new(),
            txs: Vec::new(),
            next_tx: 0,
        }
    }

    pub fn config(&self) -> &PropagationConfig {
        &self.cfg
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn add_node(&mut self, spec: NodeSpec) -> NodeId {
        self.nodes.push(spec);
        NodeId(self.nodes.len() as u32 - 1)
    }

    pub fn node(&self, id: NodeId) -> Result<&NodeSpec, RadioError> {
        self.nodes
            .get(id.0 as usize)
            .ok_or(RadioError::UnknownNode(id))
    }

    pub fn node_by_name(&self, name: &str) -> Option<NodeId> {
        self.nodes
            .iter()
            .position(|n| n.name == name)
            .map(|i| NodeId(i as u32))
    }

    pub fn set_faulty(&mut self, id: NodeId, faulty: bool) -> Result<(), RadioError> {
        self.nodes
            .get_mut(id.0 as usize)
            .ok_or(RadioError::UnknownNode(id))?
            .faulty = faulty;
        Ok(())
    }

    pub fn add_interferer(&mut self, profile: InterfererProfile) -> Result<(), RadioError> {
        profile.validate()?;
        let stream = fnv1a64(format!("interferer/{}", self.interferers.len()).as_bytes());
        self.interferers
            .push(Interferer::new(profile, self.seed, stream));
        Ok(())
    }

    pub fn interferers(&self) -> impl Iterator<Item = &InterfererProfile> {
        self.interferers.iter().map(|i| &i.profile)
    }

    pub fn transmissions(&self) -> &[Transmission] {
        &self.txs
    }

    pub fn transmission(&self, id: TxId) -> Option<&Transmission> {
        self.txs.iter().find(|t| t.id == id)
    }

    /// Puts a frame on air at `start`; its duration follows from the radio's
    /// per-byte airtime.
    pub fn schedule_tx(
        &mut self,
        node: NodeId,
        band: Band,
        channel: u32,
        start: Micros,
        power_dbm: f64,
        payload: Vec<u8>,
    ) -> Result<TxId, RadioError> {
        let radio = self
            .node(node)?
            .radio(band)
            .ok_or(RadioError::NoRadio(band))?;
        if !radio.can_transmit {
            return Err(RadioError::ReceiveOnly);
        }
        if channel >= radio.channel_count {
            return Err(RadioError::UnsupportedChannel { band, channel });
        }
        if !(MIN_TX_POWER_DBM..=radio.tx_power_dbm).contains(&power_dbm) {
            return Err(RadioError::PowerOutOfRange(power_dbm));
        }
        if payload.is_empty() {
            return Err(RadioError::EmptyPayload);
        }
        let end = start + radio.airtime(payload.len());
        let id = TxId(self.next_tx);
        self.next_tx += 1;
        self.txs.push(Transmission {
            id,
            node,
            band,
            channel,
            start,
            end,
            power_dbm,
            payload,
        });
        Ok(id)
    }

    fn at(&self, id: NodeId) -> (&Position, Environment) {
        let n = &self.nodes[id.0 as usize];
        (&n.position, n.environment)
    }

    /// Power of transmission `tx` as seen at node `rx`.
    pub fn received_dbm(&self, tx: &Transmission, rx: NodeId) -> f64 {
        self.cfg
            .received_dbm(tx.power_dbm, self.at(tx.node), self.at(rx))
    }

    fn interferer_dbm(&self, i: &InterfererProfile, at: (&Position, Environment)) -> f64 {
        self.cfg
            .received_dbm(i.power_dbm, (&i.position, i.environment), at)
    }

    /// Decides the fate of `tx` at receiver `rx`, using every co-channel
    /// emission that overlaps the frame as interference at full power.
    pub fn evaluate(&self, tx: TxId, rx: NodeId) -> Result<Reception, RadioError> {
        let frame = self
            .transmission(tx)
            .ok_or(RadioError::UnknownTransmission)?;
        let node = self.node(rx)?;
        let Some(radio) = node.radio(frame.band) else {
            return Ok(Reception::NoRadio);
        };
        if frame.channel >= radio.channel_count {
            return Ok(Reception::NoRadio);
        }
        let rx_dbm = self.received_dbm(frame, rx);
        let mut interference_mw = 0.0;
        for other in &self.txs {
            if other.id != frame.id
                && other.node != rx
                && other.band == frame.band
                && other.channel == frame.channel
                && other.overlaps(frame.start, frame.end)
            {
                interference_mw += dbm_to_mw(self.received_dbm(other, rx));
            }
        }
        for i in &self.interferers {
            if i.active_during(frame.band, frame.channel, frame.start, frame.end) {
                interference_mw += dbm_to_mw(self.interferer_dbm(&i.profile, self.at(rx)));
            }
        }
        let noise_mw = dbm_to_mw(self.cfg.noise_floor_dbm);
        let sinr_db = rx_dbm - mw_to_dbm(interference_mw + noise_mw);
        if rx_dbm < radio.sensitivity_dbm {
            return Ok(Reception::BelowSensitivity { rx_dbm });
        }
        if sinr_db < self.cfg.sinr_threshold_db {
            return Ok(Reception::Collision { rx_dbm, sinr_db });
        }
        let mut payload = frame.payload.clone();
        if node.faulty || self.nodes[frame.node.0 as usize].faulty {
            for b in &mut payload {
                *b ^= 0xa5;
            }
        }
        Ok(Reception::Delivered(payload))
    }

    /// Energy-detection sensing at `node` over `[start, start + window)`.
    pub fn sense(
        &self,
        node: NodeId,
        band: Band,
        channel: u32,
        start: Micros,
        window: Micros,
    ) -> Result<SenseResult, RadioError> {
        let spec = self.node(node)?;
        let radio = spec.radio(band).ok_or(RadioError::NoRadio(band))?;
        if channel >= radio.channel_count {
            return Err(RadioError::UnsupportedChannel { band, channel });
        }
        let here = (&spec.position, spec.environment);
        let period = self.cfg.sample_period.max(1);
        let n = (window / period).max(1);
        let end = start + n * period;
        let emitters: Vec<(&Transmission, f64)> = self
            .txs
            .iter()
            .filter(|t| t.band == band && t.channel == channel && t.overlaps(start, end))
            .map(|t| {
                (
                    t,
                    dbm_to_mw(self.cfg.received_dbm(t.power_dbm, self.at(t.node), here)),
                )
            })
            .collect();
        let interferers: Vec<(&Interferer, f64)> = self
            .interferers
            .iter()
            .filter(|i| i.active_during(band, channel, start, end))
            .map(|i| (i, dbm_to_mw(self.interferer_dbm(&i.profile, here))))
            .collect();
        let stream = fnv1a64(format!("{}/{}/{}", spec.name, band.name(), channel).as_bytes());
        let mut samples = Vec::with_capacity(n as usize);
        let mut busy = 0u64;
        for k in 0..n {
            let t = start + k * period;
            let jitter =
                (2.0 * unit(self.seed, stream, t / period) - 1.0) * self.cfg.noise_jitter_db;
            let mut mw = dbm_to_mw(self.cfg.noise_floor_dbm + jitter);
            for (tx, p) in &emitters {
                if tx.active_at(t) {
                    mw += p;
                }
            }
            for (i, p) in &interferers {
                if i.active_at(band, channel, t) {
                    mw += p;
                }
            }
            let psd_dbm = mw_to_dbm(mw);
            if psd_dbm >= self.cfg.ed_threshold_dbm {
                busy += 1;
            }
            samples.push(PsdSample {
                t,
                channel,
                psd_dbm,
            });
        }
        Ok(SenseResult {
            occupancy: busy as f64 / n as f64,
            log: SpectrumLog {
                band,
                window: n * period,
                sample_period: period,
                samples,
            },
        })
    }

    /// Forgets transmissions that ended before `t`.
    pub fn prune(&mut self, t: Micros) {
        self.txs.retain(|x| x.end >= t);
    }
}
