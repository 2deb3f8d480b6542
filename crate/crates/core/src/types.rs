//! Domain types shared by every stage of the pipeline.
//!
//! The array has eight differential channels laid out as a compass star.
//! Channel index 0 is North and indices proceed clockwise in 45 degree steps,
//! so the channel order of a [`Recording`] is always N, NE, E, SE, S, SW, W, NW.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Number of directional channels on the star array.
pub const N_DIRECTIONS: usize = 8;

/// One arm of the star array.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Direction {
    N,
    NE,
    E,
    SE,
    S,
    SW,
    W,
    NW,
}

impl Direction {
    pub const ALL: [Direction; N_DIRECTIONS] = [
        Direction::N,
        Direction::NE,
        Direction::E,
        Direction::SE,
        Direction::S,
        Direction::SW,
        Direction::W,
        Direction::NW,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(index: usize) -> Option<Direction> {
        Self::ALL.get(index).copied()
    }

    pub fn label(self) -> &'static str {
        match self {
            Direction::N => "N",
            Direction::NE => "NE",
            Direction::E => "E",
            Direction::SE => "SE",
            Direction::S => "S",
            Direction::SW => "SW",
            Direction::W => "W",
            Direction::NW => "NW",
        }
    }

    /// Compass bearing in degrees, North = 0, clockwise.
    pub fn angle_deg(self) -> f64 {
        45.0 * self.index() as f64
    }

    /// Parses a compass label, ignoring case and surrounding whitespace.
    pub fn from_label(label: &str) -> Result<Direction> {
        let trimmed = label.trim();
        Self::ALL
            .iter()
            .copied()
            .find(|d| d.label().eq_ignore_ascii_case(trimmed))
            .ok_or_else(|| Error::UnknownDirection(label.to_string()))
    }
}

impl fmt::Display for Direction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for Direction {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Direction::from_label(s)
    }
}

/// Looks up a direction by compass label (case-insensitive).
pub fn direction_of_label(label: &str) -> Result<Direction> {
    Direction::from_label(label)
}

/// How distance between two channels is counted.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SeparationMetric {
    /// `|i - j|` on the ordered array.
    #[default]
    Linear,
    /// Shortest way round the ring of eight arms.
    Circular,
}

impl SeparationMetric {
    /// Largest separation the metric can produce for eight channels.
    pub fn max_separation(self) -> usize {
        match self {
            SeparationMetric::Linear => N_DIRECTIONS - 1,
            SeparationMetric::Circular => N_DIRECTIONS / 2,
        }
    }
}

impl FromStr for SeparationMetric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "linear" => Ok(SeparationMetric::Linear),
            "circular" => Ok(SeparationMetric::Circular),
            other => Err(Error::Config(format!(
                "unknown separation metric {other:?} (expected linear or circular)"
            ))),
        }
    }
}

impl fmt::Display for SeparationMetric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SeparationMetric::Linear => "linear",
            SeparationMetric::Circular => "circular",
        })
    }
}

pub fn separation(a: Direction, b: Direction, metric: SeparationMetric) -> usize {
    let d = a.index().abs_diff(b.index());
    match metric {
        SeparationMetric::Linear => d,
        SeparationMetric::Circular => d.min(N_DIRECTIONS - d),
    }
}

/// Raw samples of one differential channel, in millivolts.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelSeries {
    pub direction: Direction,
    pub samples: Vec<f64>,
    /// `false` marks a gap; the matching sample value is meaningless.
    pub validity_mask: Vec<bool>,
}

impl ChannelSeries {
    /// Builds a series with every finite sample marked valid.
    pub fn from_samples(direction: Direction, samples: Vec<f64>) -> Self {
        let validity_mask = samples.iter().map(|v| v.is_finite()).collect();
        ChannelSeries {
            direction,
            samples,
            validity_mask,
        }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn valid_count(&self) -> usize {
        self.validity_mask.iter().filter(|&&v| v).count()
    }
}

/// A time-aligned eight-channel recording sampled on a uniform grid.
#[derive(Debug, Clone, PartialEq)]
pub struct Recording {
    pub session_id: String,
    pub sample_rate: f64,
    /// Time of the first sample, in the units of the source time column
    /// (elapsed seconds or Unix seconds for absolute timestamps).
    pub t0: f64,
    pub channels: Vec<ChannelSeries>,
}

impl Recording {
    /// Validates the structural invariants and builds the recording.
    pub fn new(
        session_id: impl Into<String>,
        sample_rate: f64,
        t0: f64,
        channels: Vec<ChannelSeries>,
    ) -> Result<Self> {
        if !(sample_rate.is_finite() && sample_rate > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "sample rate must be positive, got {sample_rate}"
            )));
        }
        if channels.len() != N_DIRECTIONS {
            return Err(Error::InvalidParameter(format!(
                "expected {N_DIRECTIONS} channels, got {}",
                channels.len()
            )));
        }
        let len = channels[0].len();
        if len < 2 {
            return Err(Error::InvalidParameter(
                "recording must hold at least 2 samples".into(),
            ));
        }
        for (i, ch) in channels.iter().enumerate() {
            if ch.direction.index() != i {
                return Err(Error::InvalidParameter(format!(
                    "channel {i} is {} but must follow compass order",
                    ch.direction
                )));
            }
            if ch.len() != len || ch.validity_mask.len() != len {
                return Err(Error::InvalidParameter(format!(
                    "channel {} length differs from the rest",
                    ch.direction
                )));
            }
            if ch
                .samples
                .iter()
                .zip(&ch.validity_mask)
                .any(|(v, &ok)| ok && !v.is_finite())
            {
                return Err(Error::InvalidParameter(format!(
                    "channel {} has a non-finite valid sample",
                    ch.direction
                )));
            }
        }
        Ok(Recording {
            session_id: session_id.into(),
            sample_rate,
            t0,
            channels,
        })
    }

    pub fn len(&self) -> usize {
        self.channels.first().map_or(0, ChannelSeries::len)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn duration_s(&self) -> f64 {
        self.len() as f64 / self.sample_rate
    }

    pub fn channel(&self, direction: Direction) -> &ChannelSeries {
        &self.channels[direction.index()]
    }
}

/// One detected (or planted) excursion on a channel. Times are elapsed
/// seconds from the first sample of the recording.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpikeEvent {
    pub direction: Direction,
    pub onset_s: f64,
    pub peak_s: f64,
    pub offset_s: f64,
    #[serde(rename = "amplitude_mV")]
    pub amplitude_mv: f64,
    pub duration_s: f64,
}

/// A train of spikes on one channel with no quiescent interval longer than
/// the burst gap between consecutive members.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Burst {
    pub direction: Direction,
    pub spikes: Vec<SpikeEvent>,
    pub onset_s: f64,
    pub duration_s: f64,
    pub size: usize,
}

impl Burst {
    /// Builds a burst from a non-empty, onset-ordered run of spikes.
    pub fn from_spikes(spikes: Vec<SpikeEvent>) -> Self {
        let first = spikes.first().expect("burst needs at least one spike");
        let direction = first.direction;
        let onset_s = first.onset_s;
        let end = spikes
            .iter()
            .map(|s| s.offset_s)
            .fold(f64::NEG_INFINITY, f64::max);
        Burst {
            direction,
            onset_s,
            duration_s: end - onset_s,
            size: spikes.len(),
            spikes,
        }
    }
}

/// Every tunable of the analysis pipeline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalysisConfig {
    pub detrend_window_s: f64,
    pub dispersion_k: f64,
    pub min_spike_duration_s: f64,
    pub merge_gap_s: f64,
    pub burst_gap_s: f64,
    pub propagation_window_s: f64,
    pub reference_direction: Direction,
    pub separation_metric: SeparationMetric,
    pub max_gap_interp_samples: usize,
}

impl Default for AnalysisConfig {
    fn default() -> Self {
        AnalysisConfig {
            detrend_window_s: 3600.0,
            dispersion_k: 4.0,
            min_spike_duration_s: 30.0,
            merge_gap_s: 10.0,
            burst_gap_s: 600.0,
            propagation_window_s: 3600.0,
            reference_direction: Direction::E,
            separation_metric: SeparationMetric::Linear,
            max_gap_interp_samples: 5,
        }
    }
}

impl AnalysisConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("detrend_window_s", self.detrend_window_s),
            ("dispersion_k", self.dispersion_k),
            ("min_spike_duration_s", self.min_spike_duration_s),
            ("merge_gap_s", self.merge_gap_s),
            ("burst_gap_s", self.burst_gap_s),
            ("propagation_window_s", self.propagation_window_s),
        ];
        for (name, value) in positive {
            if !(value.is_finite() && value > 0.0) {
                return Err(Error::Config(format!("{name} must be > 0, got {value}")));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn label_lookup() {
        let n = direction_of_label("N").unwrap();
        assert_eq!((n.index(), n.angle_deg()), (0, 0.0));
        let e = direction_of_label("E").unwrap();
        assert_eq!((e.index(), e.angle_deg()), (2, 90.0));
        assert_eq!(direction_of_label("nw").unwrap(), Direction::NW);
        match direction_of_label("XY") {
            Err(Error::UnknownDirection(s)) => assert_eq!(s, "XY"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn label_round_trip_and_angles() {
        for (i, d) in Direction::ALL.iter().enumerate() {
            assert_eq!(direction_of_label(d.label()).unwrap(), *d);
            assert_eq!(d.index(), i);
            assert_eq!(d.angle_deg(), 45.0 * i as f64);
            assert_eq!(Direction::from_index(i), Some(*d));
        }
        assert_eq!(Direction::from_index(8), None);
    }

    #[test]
    fn separation_examples() {
        use Direction::*;
        assert_eq!(separation(N, N, SeparationMetric::Linear), 0);
        assert_eq!(separation(N, NW, SeparationMetric::Linear), 7);
        assert_eq!(separation(N, NW, SeparationMetric::Circular), 1);
        assert_eq!(separation(N, S, SeparationMetric::Circular), 4);
    }

    fn any_direction() -> impl Strategy<Value = Direction> {
        (0usize..8).prop_map(|i| Direction::ALL[i])
    }

    proptest! {
        #[test]
        fn separation_symmetric_and_bounded(a in any_direction(), b in any_direction()) {
            for m in [SeparationMetric::Linear, SeparationMetric::Circular] {
                prop_assert_eq!(separation(a, b, m), separation(b, a, m));
            }
            let lin = separation(a, b, SeparationMetric::Linear);
            let circ = separation(a, b, SeparationMetric::Circular);
            prop_assert!(circ <= lin);
            prop_assert!(circ <= 4);
        }
    }

    #[test]
    fn recording_rejects_ragged_channels() {
        let mut chans: Vec<ChannelSeries> = Direction::ALL
            .iter()
            .map(|&d| ChannelSeries::from_samples(d, vec![0.0; 4]))
            .collect();
        assert!(Recording::new("s", 1.0, 0.0, chans.clone()).is_ok());
        chans[3].samples.push(1.0);
        chans[3].validity_mask.push(true);
        assert!(Recording::new("s", 1.0, 0.0, chans).is_err());
    }

    #[test]
    fn default_config_is_valid() {
        AnalysisConfig::default().validate().unwrap();
        let bad = AnalysisConfig {
            dispersion_k: 0.0,
            ..AnalysisConfig::default()
        };
        assert!(bad.validate().is_err());
    }
}
