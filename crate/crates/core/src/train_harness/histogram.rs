use std::path::Path;

use crate::error::Result;
use crate::io_formats::{emit_metrics, MetricRecord};

use super::data::Dataset;
use super::trainer::TrainState;

pub const HIST_BINS: usize = 64;

/// Positive (own proxy) and negative (other proxies) cosine histograms over
/// `[-1, 1]`, with their moments.
#[derive(Debug, Clone, PartialEq)]
pub struct CosineHistograms {
    pub pad: Vec<u64>,
    pub nad: Vec<u64>,
    pub pad_mean: f64,
    pub pad_std: f64,
    pub nad_mean: f64,
    pub nad_std: f64,
}

fn bin(c: f64) -> usize {
    let b = ((c + 1.0) / 2.0 * HIST_BINS as f64).floor();
    (b.max(0.0) as usize).min(HIST_BINS - 1)
}

#[derive(Default)]
struct Moments {
    n: u64,
    sum: f64,
    sum_sq: f64,
}

impl Moments {
    fn push(&mut self, v: f64) {
        self.n += 1;
        self.sum += v;
        self.sum_sq += v * v;
    }

    fn mean_std(&self) -> (f64, f64) {
        if self.n == 0 {
            return (0.0, 0.0);
        }
        let mean = self.sum / self.n as f64;
        (mean, (self.sum_sq / self.n as f64 - mean * mean).max(0.0).sqrt())
    }
}

pub fn histogram_dump(state: &TrainState, dataset: &Dataset) -> CosineHistograms {
    let z = state.embed(dataset.x.view());
    let w = state.proxies.as_array();
    let mut pad = vec![0u64; HIST_BINS];
    let mut nad = vec![0u64; HIST_BINS];
    let (mut pm, mut nm) = (Moments::default(), Moments::default());
    for (row, &y) in z.rows().into_iter().zip(&dataset.labels) {
        let norm = row.dot(&row).sqrt();
        if norm == 0.0 {
            continue;
        }
        let cos = w.dot(&row) / norm;
        for (j, &c) in cos.iter().enumerate() {
            let c = c.clamp(-1.0, 1.0);
            if j == y {
                pad[bin(c)] += 1;
                pm.push(c);
            } else {
                nad[bin(c)] += 1;
                nm.push(c);
            }
        }
    }
    let (pad_mean, pad_std) = pm.mean_std();
    let (nad_mean, nad_std) = nm.mean_std();
    CosineHistograms {
        pad,
        nad,
        pad_mean,
        pad_std,
        nad_mean,
        nad_std,
    }
}

impl CosineHistograms {
    pub fn bin_records(&self) -> Vec<MetricRecord> {
        (0..HIST_BINS)
            .map(|b| {
                let lo = -1.0 + 2.0 * b as f64 / HIST_BINS as f64;
                [
                    ("bin_lo", lo),
                    ("bin_hi", lo + 2.0 / HIST_BINS as f64),
                    ("pad", self.pad[b] as f64),
                    ("nad", self.nad[b] as f64),
                ]
                .into_iter()
                .map(|(k, v)| (k.to_string(), v))
                .collect()
            })
            .collect()
    }

    pub fn stats_records(&self) -> Vec<MetricRecord> {
        let rec = [
            ("pad_count", self.pad.iter().sum::<u64>() as f64),
            ("pad_mean", self.pad_mean),
            ("pad_std", self.pad_std),
            ("nad_count", self.nad.iter().sum::<u64>() as f64),
            ("nad_mean", self.nad_mean),
            ("nad_std", self.nad_std),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect();
        vec![rec]
    }

    /// Writes `hist.csv` (bins) and `hist_stats.csv` (moments) into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| crate::Error::io(dir, e))?;
        emit_metrics(&self.bin_records(), dir.join("hist.csv"))?;
        emit_metrics(&self.stats_records(), dir.join("hist_stats.csv"))
    }
}
