//! Event-based propagation: burst onsets on a reference channel, delay to
//! the first spike onset in every other direction, and their summaries.
//!
//! The match window is `[t, t + window]`, inclusive at both ends. Each
//! reference onset is matched independently, so a single target spike can
//! answer several reference onsets whose windows overlap.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::events::SpikeTrain;
use crate::stats;
use crate::types::{Burst, Direction, N_DIRECTIONS};

pub fn burst_onsets(bursts: &[Burst]) -> Vec<f64> {
    let mut onsets: Vec<f64> = bursts.iter().map(|b| b.onset_s).collect();
    onsets.sort_by(f64::total_cmp);
    onsets
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "outcome", rename_all = "lowercase")]
pub enum DelayOutcome {
    Matched { delay_s: f64 },
    Unmatched,
}

impl DelayOutcome {
    pub fn delay(self) -> Option<f64> {
        match self {
            DelayOutcome::Matched { delay_s } => Some(delay_s),
            DelayOutcome::Unmatched => None,
        }
    }
}

/// Outcomes for one reference onset, one entry per non-reference direction
/// in compass order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReferenceEvent {
    pub onset_s: f64,
    pub outcomes: Vec<(Direction, DelayOutcome)>,
}

impl ReferenceEvent {
    pub fn outcome(&self, d: Direction) -> Option<DelayOutcome> {
        self.outcomes.iter().find(|(dir, _)| *dir == d).map(|&(_, o)| o)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DelayTable {
    pub reference: Direction,
    pub window_s: f64,
    pub events: Vec<ReferenceEvent>,
}

impl DelayTable {
    /// Concatenates tables that share reference and window.
    pub fn concat(tables: &[&DelayTable]) -> Option<DelayTable> {
        let first = tables.first()?;
        Some(DelayTable {
            reference: first.reference,
            window_s: first.window_s,
            events: tables.iter().flat_map(|t| t.events.iter().cloned()).collect(),
        })
    }
}

/// First onset in `onsets` (sorted) inside `[t, t + window]`.
fn first_at_or_after(onsets: &[f64], t: f64, window_s: f64) -> Option<f64> {
    let idx = onsets.partition_point(|&o| o < t);
    onsets.get(idx).copied().filter(|&o| o - t <= window_s)
}

pub fn match_delays(
    ref_onsets: &[f64],
    trains: &[SpikeTrain],
    window_s: f64,
    reference: Direction,
) -> Result<DelayTable> {
    if !(window_s.is_finite() && window_s > 0.0) {
        return Err(Error::InvalidParameter(format!(
            "propagation window must be > 0, got {window_s}"
        )));
    }
    let targets: Vec<(Direction, Vec<f64>)> = Direction::ALL
        .iter()
        .filter(|&&d| d != reference)
        .map(|&d| {
            let mut onsets: Vec<f64> = trains
                .iter()
                .filter(|t| t.direction == d)
                .flat_map(|t| t.onsets())
                .collect();
            onsets.sort_by(f64::total_cmp);
            (d, onsets)
        })
        .collect();
    let events = ref_onsets
        .iter()
        .map(|&t| ReferenceEvent {
            onset_s: t,
            outcomes: targets
                .iter()
                .map(|(d, onsets)| {
                    let outcome = match first_at_or_after(onsets, t, window_s) {
                        Some(o) => DelayOutcome::Matched { delay_s: o - t },
                        None => DelayOutcome::Unmatched,
                    };
                    (*d, outcome)
                })
                .collect(),
        })
        .collect();
    Ok(DelayTable {
        reference,
        window_s,
        events,
    })
}

/// Delay summary for one target direction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DirectionDelay {
    pub direction: Direction,
    /// Absent when nothing matched.
    pub median_delay_s: Option<f64>,
    pub iqr_s: Option<(f64, f64)>,
    /// Absent when there were no reference onsets.
    pub match_rate: Option<f64>,
    /// Number of matched reference onsets.
    pub n_events: usize,
    pub n_reference: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PropagationSummary {
    pub reference: Direction,
    pub window_s: f64,
    pub directions: Vec<DirectionDelay>,
}

impl PropagationSummary {
    pub fn direction(&self, d: Direction) -> Option<&DirectionDelay> {
        self.directions.iter().find(|x| x.direction == d)
    }
}

pub fn summarize_propagation(t: &DelayTable) -> PropagationSummary {
    let n_reference = t.events.len();
    let directions = Direction::ALL
        .iter()
        .filter(|&&d| d != t.reference)
        .map(|&d| {
            let delays: Vec<f64> = t
                .events
                .iter()
                .filter_map(|e| e.outcome(d).and_then(DelayOutcome::delay))
                .collect();
            let q = stats::quartiles(&delays);
            DirectionDelay {
                direction: d,
                median_delay_s: q.map(|q| q.1),
                iqr_s: q.map(|q| (q.0, q.2)),
                match_rate: (n_reference > 0).then(|| delays.len() as f64 / n_reference as f64),
                n_events: delays.len(),
                n_reference,
            }
        })
        .collect();
    PropagationSummary {
        reference: t.reference,
        window_s: t.window_s,
        directions,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PolarPoint {
    pub angle_deg: f64,
    pub direction: Direction,
    pub value: Option<f64>,
}

/// Orders per-direction values by compass angle, N first. Directions with
/// no value are kept as absent entries.
pub fn polar_summary(values: &[(Direction, f64)]) -> Vec<PolarPoint> {
    let mut slots = [None; N_DIRECTIONS];
    for &(d, v) in values {
        slots[d.index()] = Some(v);
    }
    Direction::ALL
        .iter()
        .map(|&d| PolarPoint {
            angle_deg: d.angle_deg(),
            direction: d,
            value: slots[d.index()],
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::SpikeEvent;
    use proptest::prelude::*;

    fn spike(d: Direction, onset: f64) -> SpikeEvent {
        SpikeEvent {
            direction: d,
            onset_s: onset,
            peak_s: onset + 20.0,
            offset_s: onset + 40.0,
            amplitude_mv: 5.0,
            duration_s: 40.0,
        }
    }

    fn trains(spikes: &[(Direction, f64)]) -> Vec<SpikeTrain> {
        Direction::ALL
            .iter()
            .map(|&d| SpikeTrain {
                direction: d,
                spikes: spikes.iter().filter(|s| s.0 == d).map(|&(d, o)| spike(d, o)).collect(),
                observed_duration_s: 1e6,
                dispersion_mv: 1.0,
                threshold_mv: 4.0,
                flat: false,
            })
            .collect()
    }

    fn burst_at(onset: f64) -> Burst {
        Burst::from_spikes(vec![spike(Direction::E, onset)])
    }

    #[test]
    fn onsets_sorted() {
        assert_eq!(burst_onsets(&[burst_at(100.0), burst_at(5000.0)]), vec![100.0, 5000.0]);
        assert!(burst_onsets(&[]).is_empty());
        assert_eq!(burst_onsets(&[burst_at(5000.0), burst_at(100.0)]), vec![100.0, 5000.0]);
    }

    #[test]
    fn first_spike_rule() {
        let tr = trains(&[(Direction::W, 900.0), (Direction::W, 1005.0), (Direction::W, 1100.0), (Direction::N, 1000.0)]);
        let table = match_delays(&[1000.0], &tr, 3600.0, Direction::E).unwrap();
        let ev = &table.events[0];
        assert_eq!(ev.outcome(Direction::W), Some(DelayOutcome::Matched { delay_s: 5.0 }));
        assert_eq!(ev.outcome(Direction::S), Some(DelayOutcome::Unmatched));
        assert_eq!(ev.outcome(Direction::N), Some(DelayOutcome::Matched { delay_s: 0.0 }));
        assert_eq!(ev.outcome(Direction::E), None);
        assert_eq!(ev.outcomes.len(), 7);
    }

    #[test]
    fn summary_examples() {
        let tr = trains(&[(Direction::N, 10.0), (Direction::N, 10_100.0), (Direction::N, 21_000.0)]);
        let table = match_delays(&[0.0, 10_000.0, 20_000.0, 40_000.0], &tr, 3600.0, Direction::E).unwrap();
        let s = summarize_propagation(&table);
        let n = s.direction(Direction::N).unwrap();
        assert_eq!(n.median_delay_s, Some(100.0));
        assert_eq!(n.match_rate, Some(0.75));
        assert_eq!(n.n_events, 3);
        let tr = trains(&[(Direction::S, 5.0)]);
        let table = match_delays(&[0.0, 100.0, 200.0, 300.0], &tr, 50.0, Direction::E).unwrap();
        let s = summarize_propagation(&table);
        assert_eq!(s.direction(Direction::S).unwrap().match_rate, Some(0.25));
        let w = s.direction(Direction::W).unwrap();
        assert_eq!((w.median_delay_s, w.iqr_s), (None, None));
        assert!(s.direction(Direction::E).is_none());
    }

    #[test]
    fn empty_reference_has_no_rates() {
        let table = match_delays(&[], &trains(&[]), 3600.0, Direction::E).unwrap();
        let s = summarize_propagation(&table);
        assert!(s.directions.iter().all(|d| d.match_rate.is_none()));
        assert!(match_delays(&[], &trains(&[]), 0.0, Direction::E).is_err());
    }

    #[test]
    fn polar_examples() {
        let all: Vec<(Direction, f64)> = Direction::ALL.iter().map(|&d| (d, 2.0)).collect();
        let p = polar_summary(&all);
        assert!(p.iter().all(|x| x.value == Some(2.0)));
        assert_eq!(p.iter().map(|x| x.angle_deg).collect::<Vec<_>>(), vec![0.0, 45.0, 90.0, 135.0, 180.0, 225.0, 270.0, 315.0]);
        let p = polar_summary(&[(Direction::E, 5.0)]);
        let present: Vec<_> = p.iter().filter(|x| x.value.is_some()).collect();
        assert_eq!(present.len(), 1);
        assert_eq!((present[0].angle_deg, present[0].value), (90.0, Some(5.0)));
        let p = polar_summary(&[(Direction::NW, 1.0), (Direction::N, 3.0)]);
        assert_eq!(p[0].value, Some(3.0));
        assert_eq!(p[7].value, Some(1.0));
    }

    fn scenario() -> impl Strategy<Value = (Vec<f64>, Vec<(Direction, f64)>)> {
        (
            prop::collection::vec(0.0f64..50_000.0, 0..15),
            prop::collection::vec(((0usize..8), 0.0f64..60_000.0), 0..60),
        )
            .prop_map(|(refs, spikes)| {
                let mut refs: Vec<f64> = refs.into_iter().map(f64::round).collect();
                refs.sort_by(f64::total_cmp);
                let mut spikes: Vec<(Direction, f64)> = spikes.into_iter().map(|(i, o)| (Direction::ALL[i], o.round())).collect();
                spikes.sort_by(|a, b| a.1.total_cmp(&b.1));
                (refs, spikes)
            })
    }

    proptest! {
        #[test]
        fn time_shift_invariance((refs, spikes) in scenario(), shift in -10_000.0f64..10_000.0) {
            let shift = shift.round();
            let base = match_delays(&refs, &trains(&spikes), 3600.0, Direction::E).unwrap();
            let moved_refs: Vec<f64> = refs.iter().map(|t| t + shift).collect();
            let moved: Vec<(Direction, f64)> = spikes.iter().map(|&(d, o)| (d, o + shift)).collect();
            let shifted = match_delays(&moved_refs, &trains(&moved), 3600.0, Direction::E).unwrap();
            for (a, b) in base.events.iter().zip(&shifted.events) {
                prop_assert_eq!(&a.outcomes, &b.outcomes);
            }
            let (sa, sb) = (summarize_propagation(&base), summarize_propagation(&shifted));
            for (a, b) in sa.directions.iter().zip(&sb.directions) {
                prop_assert_eq!(a.match_rate, b.match_rate);
            }
        }

        #[test]
        fn window_monotonicity((refs, spikes) in scenario(), w in 1.0f64..5000.0, extra in 0.0f64..5000.0) {
            let tr = trains(&spikes);
            let small = match_delays(&refs, &tr, w, Direction::E).unwrap();
            let large = match_delays(&refs, &tr, w + extra, Direction::E).unwrap();
            for (a, b) in small.events.iter().zip(&large.events) {
                for ((d, oa), (_, ob)) in a.outcomes.iter().zip(&b.outcomes) {
                    prop_assert!(*d != Direction::E);
                    if let DelayOutcome::Matched { delay_s } = oa {
                        prop_assert!(*delay_s >= 0.0 && *delay_s <= w);
                        prop_assert_eq!(*ob, *oa);
                    }
                }
            }
            let (sa, sb) = (summarize_propagation(&small), summarize_propagation(&large));
            for (a, b) in sa.directions.iter().zip(&sb.directions) {
                prop_assert!(a.match_rate.unwrap_or(0.0) <= b.match_rate.unwrap_or(0.0));
                if let (Some(m), Some((q1, q3))) = (a.median_delay_s, a.iqr_s) {
                    prop_assert!(q1 <= m && m <= q3);
                }
            }
        }
    }
}
