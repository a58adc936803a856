use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use super::sensing::SpectrumLog;
use crate::Micros;

#[derive(Debug, Clone, Copy, PartialEq, thiserror::Error)]
pub enum HistogramError {
    #[error("spectrum log is empty")]
    Empty,
    #[error("bin width must be positive and finite")]
    BinWidth,
    #[error("slice length must be positive")]
    Slice,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TimeSlice {
    pub start: Micros,
    pub end: Micros,
    pub bins: BTreeMap<i64, u64>,
}

/// Time × power-bin counts plus the marginal over the whole log. Bin `k`
/// covers `[k·width, (k+1)·width)` dBm.
#[derive(Debug, Clone, PartialEq)]
pub struct PsdHistogram {
    pub bin_width_db: f64,
    pub slices: Vec<TimeSlice>,
    pub total: BTreeMap<i64, u64>,
}

pub fn export_psd_histogram(
    log: &SpectrumLog,
    bin_width_db: f64,
    slice: Micros,
) -> Result<PsdHistogram, HistogramError> {
    if log.samples.is_empty() {
        return Err(HistogramError::Empty);
    }
    if !(bin_width_db.is_finite() && bin_width_db > 0.0) {
        return Err(HistogramError::BinWidth);
    }
    if slice == 0 {
        return Err(HistogramError::Slice);
    }
    let origin = log.samples[0].t;
    let mut slices: Vec<TimeSlice> = Vec::new();
    let mut total = BTreeMap::new();
    for s in &log.samples {
        let bin = libm::floor(s.psd_dbm / bin_width_db) as i64;
        let start = origin + (s.t - origin) / slice * slice;
        if slices.last().map(|x| x.start) != Some(start) {
            slices.push(TimeSlice {
                start,
                end: start + slice,
                bins: BTreeMap::new(),
            });
        }
        *slices.last_mut().unwrap().bins.entry(bin).or_insert(0) += 1;
        *total.entry(bin).or_insert(0) += 1;
    }
    Ok(PsdHistogram {
        bin_width_db,
        slices,
        total,
    })
}

impl PsdHistogram {
    pub fn sample_count(&self) -> u64 {
        self.total.values().sum()
    }

    /// Number of maximal runs of adjacent occupied bins in the marginal.
    pub fn modes(&self) -> usize {
        let mut modes = 0;
        let mut prev: Option<i64> = None;
        for &b in self.total.keys() {
            if prev != Some(b - 1) {
                modes += 1;
            }
            prev = Some(b);
        }
        modes
    }

    /// `section,slice_start_us,slice_end_us,bin_low_dbm,bin_high_dbm,count`;
    /// `slice` rows first, then `total` rows spanning the whole log.
    pub fn to_csv(&self) -> String {
        let mut out =
            String::from("section,slice_start_us,slice_end_us,bin_low_dbm,bin_high_dbm,count\n");
        let w = self.bin_width_db;
        for s in &self.slices {
            for (&b, &n) in &s.bins {
                out.push_str(&format!(
                    "slice,{},{},{},{},{}\n",
                    s.start,
                    s.end,
                    b as f64 * w,
                    (b + 1) as f64 * w,
                    n
                ));
            }
        }
        let (start, end) = match (self.slices.first(), self.slices.last()) {
            (Some(a), Some(z)) => (a.start, z.end),
            _ => (0, 0),
        };
        for (&b, &n) in &self.total {
            out.push_str(&format!(
                "total,{},{},{},{},{}\n",
                start,
                end,
                b as f64 * w,
                (b + 1) as f64 * w,
                n
            ));
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::radio::{Band, PsdSample};

    fn log(values: &[f64]) -> SpectrumLog {
        SpectrumLog {
            band: Band::Srd868,
            window: values.len() as u64 * 1000,
            sample_period: 1000,
            samples: values
                .iter()
                .enumerate()
                .map(|(i, &p)| PsdSample {
                    t: i as u64 * 1000,
                    channel: 0,
                    psd_dbm: p,
                })
                .collect(),
        }
    }

    #[test]
    fn identical_samples_fill_one_bin() {
        let h = export_psd_histogram(&log(&[-97.3; 100]), 1.0, 1_000_000).unwrap();
        assert_eq!(h.total.len(), 1);
        assert_eq!(h.total[&-98], 100);
        assert_eq!(h.modes(), 1);
    }

    #[test]
    fn csv_layout() {
        let h = export_psd_histogram(&log(&[-100.0, -99.5, -40.0]), 1.0, 2_000).unwrap();
        assert_eq!(
            h.to_csv(),
            "section,slice_start_us,slice_end_us,bin_low_dbm,bin_high_dbm,count\n\
             slice,0,2000,-100,-99,2\n\
             slice,2000,4000,-40,-39,1\n\
             total,0,4000,-100,-99,2\n\
             total,0,4000,-40,-39,1\n"
        );
        assert_eq!(h.modes(), 2);
    }

    #[test]
    fn rejects_bad_input() {
        assert_eq!(
            export_psd_histogram(&log(&[]), 1.0, 1),
            Err(HistogramError::Empty)
        );
        assert_eq!(
            export_psd_histogram(&log(&[1.0]), 0.0, 1),
            Err(HistogramError::BinWidth)
        );
    }
}
