//! Deterministic radio medium.
//!
//! Reception is decided once per frame at its end: the frame is delivered
//! if its received power clears the receiver's sensitivity and its SINR,
//! against every co-channel emission overlapping it, clears the threshold.
//! Sensing samples power spectral density every sample period; a sample is
//! busy when it reaches the energy-detection threshold.

mod histogram;
mod interferer;
mod medium;
mod plan;
mod propagation;
mod sensing;

pub use histogram::{export_psd_histogram, HistogramError, PsdHistogram, TimeSlice};
pub use interferer::{InterfererChannel, InterfererError, InterfererKind, InterfererProfile};
pub use medium::{
    Medium, NodeId, NodeSpec, RadioError, Reception, Transmission, TxId, MIN_TX_POWER_DBM,
};
pub use plan::{Band, Channel, ChannelPlan};
pub use propagation::{
    dbm_to_mw, mw_to_dbm, Environment, Position, PropagationConfig, Transceiver,
};
pub use sensing::{select_channel, PsdSample, SenseResult, SpectrumLog};
