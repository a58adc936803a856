use alloc::collections::BTreeMap;
use alloc::vec::Vec;
use serde::{Deserialize, Serialize};

use super::plan::Band;
use crate::Micros;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PsdSample {
    pub t: Micros,
    pub channel: u32,
    pub psd_dbm: f64,
}

/// Time-ordered power samples from one sensing window.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpectrumLog {
    pub band: Band,
    pub window: Micros,
    pub sample_period: Micros,
    pub samples: Vec<PsdSample>,
}

impl SpectrumLog {
    pub fn is_time_ordered(&self) -> bool {
        self.samples.windows(2).all(|w| w[0].t <= w[1].t)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SenseResult {
    pub occupancy: f64,
    pub log: SpectrumLog,
}

/// Least-occupied channel, lowest index on ties. NaN counts as fully busy.
pub fn select_channel(occupancy: &BTreeMap<u32, f64>) -> Option<u32> {
    let mut best: Option<(u32, f64)> = None;
    for (&ch, &o) in occupancy {
        let o = if o.is_nan() { f64::INFINITY } else { o };
        match best {
            Some((_, b)) if o >= b => {}
            _ => best = Some((ch, o)),
        }
    }
    best.map(|(ch, _)| ch)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn map(v: &[(u32, f64)]) -> BTreeMap<u32, f64> {
        v.iter().copied().collect()
    }

    #[test]
    fn argmin_with_low_index_tie_break() {
        assert_eq!(
            select_channel(&map(&[(0, 0.4), (1, 0.1), (2, 0.9)])),
            Some(1)
        );
        assert_eq!(select_channel(&map(&[(0, 0.2), (1, 0.2)])), Some(0));
        assert_eq!(select_channel(&map(&[(3, f64::NAN), (5, 1.0)])), Some(5));
        assert_eq!(select_channel(&BTreeMap::new()), None);
    }
}
