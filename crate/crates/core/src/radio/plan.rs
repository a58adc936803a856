use alloc::vec::Vec;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Band {
    /// European sub-GHz short range device band.
    Srd868,
    Ism2400,
    Uwb,
    /// TV white space receiver range.
    Uhf,
    /// Infrastructure Wi-Fi; never used for experiments.
    Wlan5,
}

impl Band {
    pub const ALL: [Band; 5] = [
        Band::Srd868,
        Band::Ism2400,
        Band::Uwb,
        Band::Uhf,
        Band::Wlan5,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Band::Srd868 => "SRD868",
            Band::Ism2400 => "ISM2400",
            Band::Uwb => "UWB",
            Band::Uhf => "UHF",
            Band::Wlan5 => "WLAN5",
        }
    }

    pub fn parse(s: &str) -> Option<Band> {
        Band::ALL
            .into_iter()
            .find(|b| b.name().eq_ignore_ascii_case(s))
    }

    /// `(low edge, width, count)` of the channel raster.
    fn raster(self) -> (u64, u64, u32) {
        match self {
            Band::Srd868 => (863_000_000, 200_000, 35),
            Band::Ism2400 => (2_404_000_000, 2_000_000, 16),
            Band::Uwb => (3_500_000_000, 500_000_000, 6),
            Band::Uhf => (470_000_000, 8_000_000, 49),
            Band::Wlan5 => (5_150_000_000, 20_000_000, 10),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Channel {
    pub index: u32,
    pub center_hz: u64,
    pub width_hz: u64,
}

impl Channel {
    pub fn low_hz(&self) -> u64 {
        self.center_hz - self.width_hz / 2
    }

    pub fn high_hz(&self) -> u64 {
        self.center_hz + self.width_hz / 2
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChannelPlan {
    pub band: Band,
    pub channels: Vec<Channel>,
}

impl ChannelPlan {
    pub fn for_band(band: Band) -> Self {
        let (low, width, count) = band.raster();
        // 2.4 GHz channels sit on a 5 MHz raster with 2 MHz occupied width
        let step = if band == Band::Ism2400 {
            5_000_000
        } else {
            width
        };
        let channels = (0..count)
            .map(|i| Channel {
                index: i,
                center_hz: low + width / 2 + step * i as u64,
                width_hz: width,
            })
            .collect();
        Self { band, channels }
    }

    pub fn len(&self) -> u32 {
        self.channels.len() as u32
    }

    pub fn is_empty(&self) -> bool {
        self.channels.is_empty()
    }

    pub fn channel(&self, index: u32) -> Option<&Channel> {
        self.channels.get(index as usize)
    }

    pub fn width_hz(&self) -> u64 {
        self.channels.first().map_or(0, |c| c.width_hz)
    }

    /// `(low, high)` edges covered by the plan.
    pub fn span_hz(&self) -> (u64, u64) {
        match (self.channels.first(), self.channels.last()) {
            (Some(a), Some(b)) => (a.low_hz(), b.high_hz()),
            _ => (0, 0),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn srd_plan_covers_band_with_200khz_channels() {
        let p = ChannelPlan::for_band(Band::Srd868);
        assert_eq!(p.len(), 35);
        assert_eq!(p.width_hz(), 200_000);
        assert_eq!(p.span_hz(), (863_000_000, 870_000_000));
        assert_eq!(p.channel(0).unwrap().center_hz, 863_100_000);
    }

    #[test]
    fn plans_are_non_overlapping() {
        for band in Band::ALL {
            let p = ChannelPlan::for_band(band);
            for w in p.channels.windows(2) {
                assert!(w[0].high_hz() <= w[1].low_hz(), "{band:?}");
            }
        }
    }

    #[test]
    fn named_plans() {
        assert_eq!(
            ChannelPlan::for_band(Band::Ism2400)
                .channel(0)
                .unwrap()
                .center_hz,
            2_405_000_000
        );
        assert_eq!(
            ChannelPlan::for_band(Band::Uwb).span_hz(),
            (3_500_000_000, 6_500_000_000)
        );
        assert_eq!(ChannelPlan::for_band(Band::Uhf).span_hz().0, 470_000_000);
        assert!(ChannelPlan::for_band(Band::Uhf).span_hz().1 <= 866_000_000);
        assert_eq!(Band::parse("srd868"), Some(Band::Srd868));
    }
}
