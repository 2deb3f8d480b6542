//! Spike detection, per-direction statistics and burst grouping.
//!
//! A spike is a maximal run of detrended samples whose magnitude reaches
//! `k` robust sigmas, after bridging sub-threshold dips shorter than the
//! merge gap, that lasts at least the minimum spike duration. Both
//! polarities count; amplitude is reported as a magnitude.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::DetrendedRecording;
use crate::stats;
use crate::types::{AnalysisConfig, Burst, Direction, SpikeEvent};

/// Converts a median absolute deviation to a Gaussian-consistent sigma.
pub const MAD_TO_SIGMA: f64 = 1.4826;

/// Fewest valid samples the dispersion estimate accepts.
pub const MIN_DISPERSION_SAMPLES: usize = 100;

/// Time-ordered spikes of one channel.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpikeTrain {
    pub direction: Direction,
    pub spikes: Vec<SpikeEvent>,
    /// Seconds of valid signal that were analysed.
    pub observed_duration_s: f64,
    #[serde(rename = "dispersion_mV")]
    pub dispersion_mv: f64,
    #[serde(rename = "threshold_mV")]
    pub threshold_mv: f64,
    /// Channel had zero dispersion and was not searched.
    pub flat: bool,
}

impl SpikeTrain {
    pub fn onsets(&self) -> Vec<f64> {
        self.spikes.iter().map(|s| s.onset_s).collect()
    }
}

/// Robust noise scale: 1.4826 times the median absolute deviation of the
/// valid residuals.
pub fn estimate_dispersion(residuals: &[f64], valid: &[bool]) -> Result<f64> {
    let mut picked: Vec<f64> = residuals
        .iter()
        .zip(valid)
        .filter(|(_, &ok)| ok)
        .map(|(&v, _)| v)
        .collect();
    if picked.len() < MIN_DISPERSION_SAMPLES {
        return Err(Error::InsufficientSamples {
            channel: String::from("?"),
            found: picked.len(),
            required: MIN_DISPERSION_SAMPLES,
        });
    }
    let centre = stats::median_in_place(&mut picked).expect("non-empty");
    for v in picked.iter_mut() {
        *v = (*v - centre).abs();
    }
    let mad = stats::median_in_place(&mut picked).expect("non-empty");
    Ok(MAD_TO_SIGMA * mad)
}

/// Detects spikes on one channel of residuals sampled at `sample_rate`.
pub fn detect_channel(
    direction: Direction,
    residuals: &[f64],
    valid: &[bool],
    sample_rate: f64,
    cfg: &AnalysisConfig,
) -> Result<SpikeTrain> {
    let dispersion = estimate_dispersion(residuals, valid).map_err(|e| match e {
        Error::InsufficientSamples {
            found, required, ..
        } => Error::InsufficientSamples {
            channel: direction.label().to_string(),
            found,
            required,
        },
        e => e,
    })?;
    let observed_duration_s = valid.iter().filter(|&&v| v).count() as f64 / sample_rate;
    let threshold = cfg.dispersion_k * dispersion;
    let mut train = SpikeTrain {
        direction,
        spikes: Vec::new(),
        observed_duration_s,
        dispersion_mv: dispersion,
        threshold_mv: threshold,
        flat: !(threshold > 0.0),
    };
    if train.flat {
        return Ok(train);
    }

    let above = |i: usize| valid[i] && residuals[i].abs() >= threshold;
    // inclusive sample ranges of supra-threshold runs, merged across short dips
    let mut runs: Vec<(usize, usize)> = Vec::new();
    let n = residuals.len();
    let mut i = 0;
    while i < n {
        if !above(i) {
            i += 1;
            continue;
        }
        let start = i;
        while i < n && above(i) {
            i += 1;
        }
        let end = i - 1;
        match runs.last_mut() {
            Some(last) if ((start - last.1 - 1) as f64 / sample_rate) < cfg.merge_gap_s => {
                last.1 = end;
            }
            _ => runs.push((start, end)),
        }
    }

    for (start, end) in runs {
        let onset_s = start as f64 / sample_rate;
        let offset_s = (end + 1) as f64 / sample_rate;
        let duration_s = offset_s - onset_s;
        if duration_s < cfg.min_spike_duration_s {
            continue;
        }
        let mut peak = start;
        let mut peak_mag = f64::NEG_INFINITY;
        for j in start..=end {
            if valid[j] && residuals[j].abs() > peak_mag {
                peak_mag = residuals[j].abs();
                peak = j;
            }
        }
        train.spikes.push(SpikeEvent {
            direction,
            onset_s,
            peak_s: peak as f64 / sample_rate,
            offset_s,
            amplitude_mv: peak_mag,
            duration_s,
        });
    }
    Ok(train)
}

/// Runs the detector on all eight channels.
pub fn detect_spikes(det: &DetrendedRecording, cfg: &AnalysisConfig) -> Result<Vec<SpikeTrain>> {
    Direction::ALL
        .par_iter()
        .map(|&d| {
            let (values, valid) = det.channel(d);
            detect_channel(d, values, valid, det.base.sample_rate, cfg)
        })
        .collect()
}

/// Rate, amplitude and interval summary of one spike train.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DirectionStats {
    pub direction: Direction,
    pub spike_count: usize,
    pub rate_per_min: f64,
    pub observed_duration_s: f64,
    /// `(q1, median, q3)`; absent for an empty train.
    #[serde(rename = "amplitude_quartiles_mV")]
    pub amplitude_quartiles_mv: Option<(f64, f64, f64)>,
    #[serde(rename = "amplitude_max_mV")]
    pub amplitude_max_mv: Option<f64>,
    /// Onset-to-onset intervals.
    pub isi_list_s: Vec<f64>,
}

pub fn direction_stats(train: &SpikeTrain) -> DirectionStats {
    let spike_count = train.spikes.len();
    let rate_per_min = if train.observed_duration_s > 0.0 {
        spike_count as f64 / (train.observed_duration_s / 60.0)
    } else {
        0.0
    };
    let amplitudes: Vec<f64> = train.spikes.iter().map(|s| s.amplitude_mv).collect();
    let onsets = train.onsets();
    DirectionStats {
        direction: train.direction,
        spike_count,
        rate_per_min,
        observed_duration_s: train.observed_duration_s,
        amplitude_quartiles_mv: stats::quartiles(&amplitudes),
        amplitude_max_mv: amplitudes.iter().copied().reduce(f64::max),
        isi_list_s: onsets.windows(2).map(|w| w[1] - w[0]).collect(),
    }
}

/// Splits a train into bursts: a new burst starts whenever the quiet time
/// between one spike's offset and the next spike's onset exceeds the gap.
pub fn group_bursts(train: &SpikeTrain, burst_gap_s: f64) -> Vec<Burst> {
    let mut bursts = Vec::new();
    let mut current: Vec<SpikeEvent> = Vec::new();
    let mut last_offset = f64::NEG_INFINITY;
    for spike in &train.spikes {
        if !current.is_empty() && spike.onset_s - last_offset > burst_gap_s {
            bursts.push(Burst::from_spikes(std::mem::take(&mut current)));
        }
        last_offset = if current.is_empty() {
            spike.offset_s
        } else {
            last_offset.max(spike.offset_s)
        };
        current.push(*spike);
    }
    if !current.is_empty() {
        bursts.push(Burst::from_spikes(current));
    }
    bursts
}

/// Uniformly binned interval counts on `[0, max_s)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IsiHistogram {
    pub bin_width_s: f64,
    pub max_s: f64,
    pub counts: Vec<usize>,
    /// Intervals at or beyond `max_s`.
    pub overflow: usize,
}

pub fn isi_histogram(isis: &[f64], bin_width_s: f64, max_s: f64) -> Result<IsiHistogram> {
    if !(bin_width_s.is_finite() && bin_width_s > 0.0) || !(max_s.is_finite() && max_s > 0.0) {
        return Err(Error::InvalidParameter(format!(
            "histogram needs positive bin width and range, got {bin_width_s} and {max_s}"
        )));
    }
    let n_bins = (max_s / bin_width_s).ceil() as usize;
    let mut counts = vec![0; n_bins];
    let mut overflow = 0;
    for &isi in isis {
        if isi >= max_s {
            overflow += 1;
        } else if isi >= 0.0 {
            let bin = ((isi / bin_width_s) as usize).min(n_bins - 1);
            counts[bin] += 1;
        }
    }
    Ok(IsiHistogram {
        bin_width_s,
        max_s,
        counts,
        overflow,
    })
}
