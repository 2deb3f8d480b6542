//! Synthetic star-array recordings with planted ground truth, and a scorer
//! that compares detector output with that truth.
//!
//! Each channel trace is slow drift (sinusoid plus random walk), white
//! noise, shared noise mixed in pairwise by channel separation, and a sum of
//! raised-cosine bumps. Bursts on each direction arrive as a Poisson process
//! with an optional dead time. Every burst on the reference direction may
//! recruit a burst in each other direction after a lognormal delay.
//!
//! All randomness comes from one seed. Each concern draws from its own
//! ChaCha stream, keyed by a fixed offset plus the channel or pair index, so
//! changing one channel's parameters leaves the others' draws untouched.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp1, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::events::SpikeTrain;
use crate::types::{separation, ChannelSeries, Direction, Recording, SeparationMetric, N_DIRECTIONS};

const STREAM_NOISE: u64 = 0;
const STREAM_DRIFT: u64 = 8;
const STREAM_BURSTS: u64 = 16;
const STREAM_RECRUIT: u64 = 24;
const STREAM_SPIKES: u64 = 32;
const STREAM_PAIRS: u64 = 64;

/// Spiking behaviour of one direction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelParams {
    /// Spontaneous bursts per hour.
    pub burst_rate_per_hr: f64,
    /// Mean of the geometric burst-size distribution (at least 1).
    pub spikes_per_burst_mean: f64,
    /// Mean exponential interval between spikes inside a burst.
    pub within_burst_isi_s: f64,
    /// Lognormal amplitude parameters, in log-millivolts.
    pub amplitude_log_mu: f64,
    pub amplitude_log_sigma: f64,
    pub spike_width_min_s: f64,
    pub spike_width_max_s: f64,
}

impl Default for ChannelParams {
    fn default() -> Self {
        ChannelParams {
            burst_rate_per_hr: 0.0,
            spikes_per_burst_mean: 1.0,
            within_burst_isi_s: 300.0,
            amplitude_log_mu: 8f64.ln(),
            amplitude_log_sigma: 1.0,
            spike_width_min_s: 80.0,
            spike_width_max_s: 110.0,
        }
    }
}

/// Recruitment of other directions by reference bursts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PropagationParams {
    pub reference: Direction,
    /// Probability that a reference burst recruits each direction
    /// (the reference's own entry is ignored).
    pub match_prob: [f64; N_DIRECTIONS],
    /// Lognormal delay parameters per direction, in log-seconds.
    pub delay_log_mu: [f64; N_DIRECTIONS],
    pub delay_log_sigma: [f64; N_DIRECTIONS],
}

impl Default for PropagationParams {
    fn default() -> Self {
        PropagationParams {
            reference: Direction::E,
            match_prob: [0.0; N_DIRECTIONS],
            delay_log_mu: [300f64.ln(); N_DIRECTIONS],
            delay_log_sigma: [1.0; N_DIRECTIONS],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthParams {
    pub session_id: String,
    pub duration_s: f64,
    pub sample_rate: f64,
    #[serde(rename = "noise_sigma_mV")]
    pub noise_sigma_mv: f64,
    #[serde(rename = "drift_amplitude_mV")]
    pub drift_amplitude_mv: f64,
    pub drift_period_s: f64,
    /// Random-walk step scale of the drift, mV per square-root second.
    #[serde(rename = "drift_walk_mV_per_sqrt_s")]
    pub drift_walk_mv_per_sqrt_s: f64,
    /// Per direction, in compass order.
    pub channels: [ChannelParams; N_DIRECTIONS],
    /// Smallest onset-to-onset interval between two spikes on one channel;
    /// also the floor of within-burst intervals.
    pub min_isi_s: f64,
    /// Amplitudes are redrawn until they reach this value.
    #[serde(rename = "amplitude_floor_mV")]
    pub amplitude_floor_mv: f64,
    /// Dead time after each spontaneous burst onset.
    pub burst_refractory_s: f64,
    pub propagation: PropagationParams,
    /// Shared-noise weight for separations 1, 2, ... (mV).
    pub coupling_mix: Vec<f64>,
    pub coupling_metric: SeparationMetric,
    /// Samples are rounded to this step, like a logger's resolution.
    #[serde(rename = "quantum_mV")]
    pub quantum_mv: f64,
    pub seed: u64,
}

impl Default for SynthParams {
    fn default() -> Self {
        SynthParams {
            session_id: "synth".into(),
            duration_s: 86_400.0,
            sample_rate: 1.0,
            noise_sigma_mv: 1.0,
            drift_amplitude_mv: 0.0,
            drift_period_s: 86_400.0,
            drift_walk_mv_per_sqrt_s: 0.0,
            channels: Default::default(),
            min_isi_s: 150.0,
            amplitude_floor_mv: 0.0,
            burst_refractory_s: 0.0,
            propagation: PropagationParams::default(),
            coupling_mix: Vec::new(),
            coupling_metric: SeparationMetric::Linear,
            quantum_mv: 1e-6,
            seed: 0,
        }
    }
}

impl SynthParams {
    /// White noise only.
    pub fn noise_only(duration_s: f64, sigma_mv: f64, seed: u64) -> Self {
        SynthParams {
            session_id: format!("noise-{seed}"),
            duration_s,
            noise_sigma_mv: sigma_mv,
            seed,
            ..SynthParams::default()
        }
    }

    /// Five days at 1 Hz with strong rate anisotropy across directions,
    /// heavy-tailed amplitudes (lognormal, median 8 mV, floored at eight
    /// noise sigmas), nearest-neighbour coupling and East as the reference
    /// with lognormal recruitment delays of median 300 s.
    pub fn paper_regime(seed: u64) -> Self {
        let rates = [
            // (bursts per hour, mean burst size)
            (2.0, 3.0),
            (0.5, 2.0),
            (1.0, 2.0),
            (0.1, 1.5),
            (0.2, 1.5),
            (1.0, 2.5),
            (0.6, 2.0),
            (0.3, 1.5),
        ];
        let channels = rates.map(|(rate, size)| ChannelParams {
            burst_rate_per_hr: rate,
            spikes_per_burst_mean: size,
            ..ChannelParams::default()
        });
        SynthParams {
            session_id: format!("paper-{seed}"),
            duration_s: 432_000.0,
            noise_sigma_mv: 0.4,
            drift_amplitude_mv: 5.0,
            drift_period_s: 86_400.0,
            drift_walk_mv_per_sqrt_s: 0.002,
            channels,
            amplitude_floor_mv: 4.0,
            propagation: PropagationParams {
                reference: Direction::E,
                match_prob: [0.3, 0.5, 0.0, 0.2, 0.1, 0.4, 0.6, 0.3],
                delay_log_mu: [300f64.ln(); N_DIRECTIONS],
                delay_log_sigma: [1.0; N_DIRECTIONS],
            },
            coupling_mix: vec![0.2],
            seed,
            ..SynthParams::default()
        }
    }

    /// Long recording built for delay recovery: isolated single-spike
    /// reference bursts separated by a dead time longer than any recruited
    /// delay, identical spike shapes on every channel, and per-direction
    /// delay medians from 10 s to 3000 s.
    pub fn propagation_benchmark(seed: u64) -> Self {
        let channels = std::array::from_fn(|i| ChannelParams {
            burst_rate_per_hr: if i == Direction::E.index() { 2.0 } else { 0.0 },
            spikes_per_burst_mean: 1.0,
            amplitude_log_mu: 20f64.ln(),
            amplitude_log_sigma: 0.0,
            spike_width_min_s: 100.0,
            spike_width_max_s: 100.0,
            ..ChannelParams::default()
        });
        let medians = [10.0, 30.0, 1.0, 100.0, 300.0, 1000.0, 3000.0, 600.0];
        SynthParams {
            session_id: format!("prop-{seed}"),
            duration_s: 14.0 * 86_400.0,
            noise_sigma_mv: 0.5,
            drift_amplitude_mv: 2.0,
            channels,
            burst_refractory_s: 9_000.0,
            propagation: PropagationParams {
                reference: Direction::E,
                match_prob: [0.9, 0.8, 0.0, 0.7, 0.6, 0.75, 0.85, 0.95],
                delay_log_mu: medians.map(f64::ln),
                delay_log_sigma: [0.25; N_DIRECTIONS],
            },
            seed,
            ..SynthParams::default()
        }
    }

    /// Noise plus shared noise whose induced correlation falls off as
    /// `exp(-s)` on the ring.
    pub fn exponential_coupling(duration_s: f64, seed: u64) -> Self {
        SynthParams {
            session_id: format!("coupling-{seed}"),
            duration_s,
            coupling_mix: (1..=4).map(|s| (0.6 * (-(s as f64)).exp()).sqrt()).collect(),
            coupling_metric: SeparationMetric::Circular,
            seed,
            ..SynthParams::default()
        }
    }

    fn max_width(&self) -> f64 {
        self.channels
            .iter()
            .map(|c| c.spike_width_max_s)
            .fold(0.0, f64::max)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |what: String| Err(Error::InvalidParameter(what));
        let non_negative = [
            ("noise_sigma_mV", self.noise_sigma_mv),
            ("drift_amplitude_mV", self.drift_amplitude_mv),
            ("drift_walk_mV_per_sqrt_s", self.drift_walk_mv_per_sqrt_s),
            ("min_isi_s", self.min_isi_s),
            ("amplitude_floor_mV", self.amplitude_floor_mv),
            ("burst_refractory_s", self.burst_refractory_s),
            ("quantum_mV", self.quantum_mv),
        ];
        for (name, v) in non_negative {
            if !(v.is_finite() && v >= 0.0) {
                return bad(format!("{name} must be finite and >= 0, got {v}"));
            }
        }
        if !(self.sample_rate.is_finite() && self.sample_rate > 0.0) {
            return bad(format!("sample_rate must be > 0, got {}", self.sample_rate));
        }
        if !(self.drift_period_s.is_finite() && self.drift_period_s > 0.0) {
            return bad(format!("drift_period_s must be > 0, got {}", self.drift_period_s));
        }
        if !(self.duration_s.is_finite() && self.duration_s * self.sample_rate >= 2.0) {
            return bad(format!("duration_s {} gives fewer than 2 samples", self.duration_s));
        }
        if self.duration_s < 10.0 * self.max_width() {
            return bad(format!(
                "duration_s {} must be at least 10x the widest spike ({} s)",
                self.duration_s,
                self.max_width()
            ));
        }
        if self.duration_s * self.sample_rate > 1e9 {
            return bad("recording would exceed 1e9 samples per channel".into());
        }
        for (d, c) in Direction::ALL.iter().zip(&self.channels) {
            let checks = [
                ("burst_rate_per_hr", c.burst_rate_per_hr),
                ("within_burst_isi_s", c.within_burst_isi_s),
                ("amplitude_log_sigma", c.amplitude_log_sigma),
                ("spike_width_min_s", c.spike_width_min_s),
                ("spike_width_max_s", c.spike_width_max_s),
            ];
            for (name, v) in checks {
                if !(v.is_finite() && v >= 0.0) {
                    return bad(format!("{d}.{name} must be finite and >= 0, got {v}"));
                }
            }
            if !(c.spikes_per_burst_mean.is_finite() && c.spikes_per_burst_mean >= 1.0) {
                return bad(format!("{d}.spikes_per_burst_mean must be >= 1"));
            }
            if !c.amplitude_log_mu.is_finite() {
                return bad(format!("{d}.amplitude_log_mu must be finite"));
            }
            if c.spike_width_min_s > c.spike_width_max_s {
                return bad(format!("{d} spike width range is inverted"));
            }
            let p = &self.propagation;
            let i = d.index();
            if !(0.0..=1.0).contains(&p.match_prob[i]) {
                return bad(format!("{d}.match_prob must lie in [0, 1]"));
            }
            if !p.delay_log_mu[i].is_finite()
                || !(p.delay_log_sigma[i].is_finite() && p.delay_log_sigma[i] >= 0.0)
            {
                return bad(format!("{d} delay parameters must be finite, sigma >= 0"));
            }
        }
        if self.coupling_mix.len() > self.coupling_metric.max_separation() {
            return bad(format!(
                "coupling_mix has {} weights but the {} metric stops at separation {}",
                self.coupling_mix.len(),
                self.coupling_metric,
                self.coupling_metric.max_separation()
            ));
        }
        if self.coupling_mix.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return bad("coupling_mix weights must be finite and >= 0".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlantedSpike {
    pub direction: Direction,
    /// Start of the bump's support.
    pub onset_s: f64,
    pub peak_s: f64,
    #[serde(rename = "amplitude_mV")]
    pub amplitude_mv: f64,
    pub width_s: f64,
    pub parent_burst_id: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlantedBurst {
    pub id: usize,
    pub direction: Direction,
    pub onset_s: f64,
    /// Spikes that survived placement.
    pub size: usize,
    /// Reference burst that recruited this one, if any.
    pub recruited_by: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlantedDelay {
    pub reference_burst_id: usize,
    pub reference_onset_s: f64,
    pub direction: Direction,
    /// Drawn delay when the direction was recruited.
    pub delay_s: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub params: SynthParams,
    pub spikes: Vec<PlantedSpike>,
    pub bursts: Vec<PlantedBurst>,
    pub delays: Vec<PlantedDelay>,
    pub warnings: Vec<String>,
}

impl GroundTruth {
    pub fn spikes_in(&self, d: Direction) -> impl Iterator<Item = &PlantedSpike> + '_ {
        self.spikes.iter().filter(move |s| s.direction == d)
    }
}

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

fn exponential(rng: &mut ChaCha8Rng, mean: f64) -> f64 {
    let e: f64 = Exp1.sample(rng);
    e * mean
}

/// Geometric count on `{1, 2, ...}` with the given mean.
fn geometric(rng: &mut ChaCha8Rng, mean: f64) -> usize {
    if mean <= 1.0 {
        return 1;
    }
    let q = 1.0 / mean;
    let u: f64 = 1.0 - rng.gen::<f64>(); // (0, 1]
    1 + (u.ln() / (1.0 - q).ln()).floor() as usize
}

/// Poisson arrivals on `[0, duration)` with a dead time after each event.
fn poisson_onsets(rng: &mut ChaCha8Rng, rate_per_s: f64, dead_time_s: f64, duration_s: f64) -> Vec<f64> {
    let mut out = Vec::new();
    if rate_per_s <= 0.0 {
        return out;
    }
    let mut t = exponential(rng, 1.0 / rate_per_s);
    while t < duration_s {
        out.push(t);
        t += dead_time_s + exponential(rng, 1.0 / rate_per_s);
    }
    out
}

struct BurstSeed {
    direction: Direction,
    onset_s: f64,
    recruited_by: Option<usize>,
}

/// Plans bursts, recruitment and spikes without touching any samples.
fn plan_events(p: &SynthParams) -> (Vec<PlantedSpike>, Vec<PlantedBurst>, Vec<PlantedDelay>) {
    let reference = p.propagation.reference;
    let mut seeds: Vec<BurstSeed> = Vec::new();
    for d in Direction::ALL {
        let mut rng = stream(p.seed, STREAM_BURSTS + d.index() as u64);
        let rate = p.channels[d.index()].burst_rate_per_hr / 3600.0;
        for onset_s in poisson_onsets(&mut rng, rate, p.burst_refractory_s, p.duration_s) {
            seeds.push(BurstSeed {
                direction: d,
                onset_s,
                recruited_by: None,
            });
        }
    }
    // reference bursts keep ids 0.. in onset order so delays can name them
    seeds.sort_by(|a, b| {
        (a.direction != reference)
            .cmp(&(b.direction != reference))
            .then(a.direction.cmp(&b.direction))
            .then(a.onset_s.total_cmp(&b.onset_s))
    });
    let n_reference = seeds.iter().filter(|s| s.direction == reference).count();

    let mut delays = Vec::new();
    let mut recruit_rngs: Vec<ChaCha8Rng> = (0..N_DIRECTIONS)
        .map(|i| stream(p.seed, STREAM_RECRUIT + i as u64))
        .collect();
    let mut recruited = Vec::new();
    for (id, seed) in seeds.iter().enumerate().take(n_reference) {
        for d in Direction::ALL.into_iter().filter(|&d| d != reference) {
            let i = d.index();
            let rng = &mut recruit_rngs[i];
            let hit = rng.gen::<f64>() < p.propagation.match_prob[i];
            let delay = p.propagation.delay_log_mu[i] + p.propagation.delay_log_sigma[i] * normal(rng);
            let delay_s = hit.then(|| delay.exp());
            delays.push(PlantedDelay {
                reference_burst_id: id,
                reference_onset_s: seed.onset_s,
                direction: d,
                delay_s,
            });
            if let Some(delay_s) = delay_s {
                if seed.onset_s + delay_s < p.duration_s {
                    recruited.push(BurstSeed {
                        direction: d,
                        onset_s: seed.onset_s + delay_s,
                        recruited_by: Some(id),
                    });
                }
            }
        }
    }
    seeds.extend(recruited);

    let mut bursts = Vec::with_capacity(seeds.len());
    let mut spikes = Vec::new();
    let mut spike_rngs: Vec<ChaCha8Rng> = (0..N_DIRECTIONS)
        .map(|i| stream(p.seed, STREAM_SPIKES + i as u64))
        .collect();
    for (id, seed) in seeds.iter().enumerate() {
        let c = &p.channels[seed.direction.index()];
        let rng = &mut spike_rngs[seed.direction.index()];
        let size = geometric(rng, c.spikes_per_burst_mean);
        let mut onset = seed.onset_s;
        for k in 0..size {
            if k > 0 {
                onset += exponential(rng, c.within_burst_isi_s).max(p.min_isi_s);
            }
            let amplitude_mv = loop {
                let a = (c.amplitude_log_mu + c.amplitude_log_sigma * normal(rng)).exp();
                if a >= p.amplitude_floor_mv {
                    break a;
                }
            };
            let width_s = c.spike_width_min_s + (c.spike_width_max_s - c.spike_width_min_s) * rng.gen::<f64>();
            spikes.push(PlantedSpike {
                direction: seed.direction,
                onset_s: onset,
                peak_s: onset + 0.5 * width_s,
                amplitude_mv,
                width_s,
                parent_burst_id: id,
            });
        }
        bursts.push(PlantedBurst {
            id,
            direction: seed.direction,
            onset_s: seed.onset_s,
            size: 0,
            recruited_by: seed.recruited_by,
        });
    }

    // one spike at a time per channel, and only whole bumps inside the record
    spikes.sort_by(|a, b| a.direction.cmp(&b.direction).then(a.onset_s.total_cmp(&b.onset_s)));
    let mut kept: Vec<PlantedSpike> = Vec::with_capacity(spikes.len());
    for s in spikes {
        if s.onset_s + s.width_s > p.duration_s {
            continue;
        }
        if let Some(prev) = kept.last() {
            if prev.direction == s.direction
                && s.onset_s < prev.onset_s + p.min_isi_s.max(prev.width_s)
            {
                continue;
            }
        }
        kept.push(s);
    }
    for s in &kept {
        bursts[s.parent_burst_id].size += 1;
    }
    (kept, bursts, delays)
}

fn channel_trace(p: &SynthParams, d: Direction, spikes: &[PlantedSpike]) -> Vec<f64> {
    let n = (p.duration_s * p.sample_rate).round() as usize;
    let dt = 1.0 / p.sample_rate;
    let mut x = vec![0.0; n];

    if p.noise_sigma_mv > 0.0 {
        let mut rng = stream(p.seed, STREAM_NOISE + d.index() as u64);
        for v in x.iter_mut() {
            *v += p.noise_sigma_mv * normal(&mut rng);
        }
    }
    if p.drift_amplitude_mv > 0.0 || p.drift_walk_mv_per_sqrt_s > 0.0 {
        let mut rng = stream(p.seed, STREAM_DRIFT + d.index() as u64);
        let phase = 2.0 * PI * rng.gen::<f64>();
        let step = p.drift_walk_mv_per_sqrt_s * dt.sqrt();
        let mut walk = 0.0;
        for (i, v) in x.iter_mut().enumerate() {
            let t = i as f64 * dt;
            walk += step * normal(&mut rng);
            *v += p.drift_amplitude_mv * (2.0 * PI * t / p.drift_period_s + phase).sin() + walk;
        }
    }
    for other in Direction::ALL {
        if other == d {
            continue;
        }
        let s = separation(d, other, p.coupling_metric);
        let w = p.coupling_mix.get(s - 1).copied().unwrap_or(0.0);
        if w <= 0.0 {
            continue;
        }
        let (lo, hi) = if d < other { (d, other) } else { (other, d) };
        let pair = (lo.index() * N_DIRECTIONS + hi.index()) as u64;
        let mut rng = stream(p.seed, STREAM_PAIRS + pair);
        for v in x.iter_mut() {
            *v += w * normal(&mut rng);
        }
    }
    for s in spikes.iter().filter(|s| s.direction == d) {
        let first = (s.onset_s * p.sample_rate).ceil() as usize;
        let last = (((s.onset_s + s.width_s) * p.sample_rate).floor() as usize).min(n.saturating_sub(1));
        for i in first..=last {
            let phase = (i as f64 * dt - s.onset_s) / s.width_s;
            x[i] += 0.5 * s.amplitude_mv * (1.0 - (2.0 * PI * phase).cos());
        }
    }
    if p.quantum_mv > 0.0 {
        for v in x.iter_mut() {
            *v = (*v / p.quantum_mv).round() * p.quantum_mv;
        }
    }
    x
}

/// Builds a recording and its ground truth. Identical parameters, seed
/// included, give bit-identical output.
pub fn generate(p: &SynthParams) -> Result<(Recording, GroundTruth)> {
    p.validate()?;
    let mut warnings = Vec::new();
    if p.channels.iter().all(|c| c.burst_rate_per_hr == 0.0) {
        warnings.push("all burst rates are zero: trace holds no planted events".to_string());
    }
    let (spikes, bursts, delays) = plan_events(p);
    let channels: Vec<ChannelSeries> = Direction::ALL
        .par_iter()
        .map(|&d| ChannelSeries::from_samples(d, channel_trace(p, d, &spikes)))
        .collect();
    let rec = Recording::new(p.session_id.clone(), p.sample_rate, 0.0, channels)?;
    Ok((
        rec,
        GroundTruth {
            params: p.clone(),
            spikes,
            bursts,
            delays,
            warnings,
        },
    ))
}

/// Counts and ratios of one matching.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Score {
    pub n_detected: usize,
    pub n_truth: usize,
    pub n_matched: usize,
    /// Absent when nothing was detected.
    pub precision: Option<f64>,
    /// Absent when nothing was planted.
    pub recall: Option<f64>,
    pub f1: Option<f64>,
}

impl Score {
    fn new(n_detected: usize, n_truth: usize, n_matched: usize) -> Self {
        let precision = (n_detected > 0).then(|| n_matched as f64 / n_detected as f64);
        let recall = (n_truth > 0).then(|| n_matched as f64 / n_truth as f64);
        let f1 = match (n_detected, n_truth) {
            (0, 0) => None,
            _ if n_matched == 0 => Some(0.0),
            _ => {
                let (p, r) = (precision.unwrap_or(0.0), recall.unwrap_or(0.0));
                Some(2.0 * p * r / (p + r))
            }
        };
        Score {
            n_detected,
            n_truth,
            n_matched,
            precision,
            recall,
            f1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DirectionScore {
    pub direction: Direction,
    #[serde(flatten)]
    pub score: Score,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionScore {
    pub tolerance_s: f64,
    pub directions: Vec<DirectionScore>,
    pub pooled: Score,
}

/// Greedy one-to-one matching of onsets: closest pairs first, ties broken
/// by the earlier detected onset. Returns the number of matches.
fn match_onsets(detected: &[f64], truth: &[f64], tol_s: f64) -> usize {
    let mut candidates: Vec<(f64, usize, usize)> = Vec::new();
    for (i, &d) in detected.iter().enumerate() {
        let lo = truth.partition_point(|&t| t < d - tol_s);
        for (j, &t) in truth.iter().enumerate().skip(lo) {
            if t > d + tol_s {
                break;
            }
            candidates.push(((d - t).abs(), i, j));
        }
    }
    candidates.sort_by(|a, b| {
        a.0.total_cmp(&b.0)
            .then(detected[a.1].total_cmp(&detected[b.1]))
            .then(truth[a.2].total_cmp(&truth[b.2]))
    });
    let mut used_d = vec![false; detected.len()];
    let mut used_t = vec![false; truth.len()];
    let mut matched = 0;
    for (_, i, j) in candidates {
        if !used_d[i] && !used_t[j] {
            used_d[i] = true;
            used_t[j] = true;
            matched += 1;
        }
    }
    matched
}

pub fn score_detection(detected: &[SpikeTrain], truth: &GroundTruth, tol_s: f64) -> Result<DetectionScore> {
    if !(tol_s.is_finite() && tol_s > 0.0) {
        return Err(Error::InvalidParameter(format!("tolerance must be > 0, got {tol_s}")));
    }
    let mut directions = Vec::with_capacity(N_DIRECTIONS);
    let (mut nd, mut nt, mut nm) = (0, 0, 0);
    for d in Direction::ALL {
        let mut det: Vec<f64> = detected
            .iter()
            .filter(|t| t.direction == d)
            .flat_map(|t| t.onsets())
            .collect();
        det.sort_by(f64::total_cmp);
        let mut tru: Vec<f64> = truth.spikes_in(d).map(|s| s.onset_s).collect();
        tru.sort_by(f64::total_cmp);
        let m = match_onsets(&det, &tru, tol_s);
        nd += det.len();
        nt += tru.len();
        nm += m;
        directions.push(DirectionScore {
            direction: d,
            score: Score::new(det.len(), tru.len(), m),
        });
    }
    Ok(DetectionScore {
        tolerance_s: tol_s,
        directions,
        pooled: Score::new(nd, nt, nm),
    })
}

/// Presents planted spikes as detector output, e.g. for self-scoring.
pub fn truth_as_trains(truth: &GroundTruth) -> Vec<SpikeTrain> {
    Direction::ALL
        .iter()
        .map(|&d| SpikeTrain {
            direction: d,
            spikes: truth
                .spikes_in(d)
                .map(|s| crate::types::SpikeEvent {
                    direction: d,
                    onset_s: s.onset_s,
                    peak_s: s.peak_s,
                    offset_s: s.onset_s + s.width_s,
                    amplitude_mv: s.amplitude_mv,
                    duration_s: s.width_s,
                })
                .collect(),
            observed_duration_s: truth.params.duration_s,
            dispersion_mv: truth.params.noise_sigma_mv,
            threshold_mv: 0.0,
            flat: false,
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn silent_params_give_zero_trace() {
        let p = SynthParams {
            noise_sigma_mv: 0.0,
            duration_s: 5_000.0,
            ..SynthParams::default()
        };
        let (rec, truth) = generate(&p).unwrap();
        assert!(rec.channels.iter().all(|c| c.samples.iter().all(|&v| v == 0.0)));
        assert!(truth.spikes.is_empty() && truth.bursts.is_empty());
        assert_eq!(truth.warnings.len(), 1);
    }

    #[test]
    fn deterministic_given_seed() {
        let mut p = SynthParams::paper_regime(5);
        p.duration_s = 20_000.0;
        let (r1, t1) = generate(&p).unwrap();
        let (r2, t2) = generate(&p).unwrap();
        assert_eq!(r1, r2);
        assert_eq!(t1, t2);
        p.seed = 6;
        let (r3, _) = generate(&p).unwrap();
        assert_ne!(r1, r3);
    }

    #[test]
    fn channel_streams_are_isolated() {
        let mut p = SynthParams::paper_regime(9);
        p.duration_s = 20_000.0;
        p.coupling_mix.clear();
        let (r1, t1) = generate(&p).unwrap();
        p.channels[Direction::SE.index()].burst_rate_per_hr = 5.0;
        let (r2, t2) = generate(&p).unwrap();
        let n = Direction::N;
        assert_eq!(r1.channel(n), r2.channel(n));
        let onsets = |t: &GroundTruth| t.spikes_in(n).map(|s| s.onset_s).collect::<Vec<_>>();
        assert_eq!(onsets(&t1), onsets(&t2));
        assert_ne!(r1.channel(Direction::SE), r2.channel(Direction::SE));
    }

    #[test]
    fn planted_spikes_are_inside_and_separated() {
        let (rec, truth) = generate(&SynthParams::paper_regime(1)).unwrap();
        assert_eq!(rec.len(), 432_000);
        for d in Direction::ALL {
            let s: Vec<_> = truth.spikes_in(d).collect();
            for w in s.windows(2) {
                assert!(w[1].onset_s >= w[0].onset_s + w[0].width_s);
            }
            for x in s {
                assert!(x.onset_s >= 0.0 && x.onset_s + x.width_s <= truth.params.duration_s);
                assert!(x.amplitude_mv >= truth.params.amplitude_floor_mv);
            }
        }
        let planted: usize = truth.bursts.iter().map(|b| b.size).sum();
        assert_eq!(planted, truth.spikes.len());
    }

    #[test]
    fn burst_counts_are_poisson_consistent() {
        let mut p = SynthParams::noise_only(2_000_000.0, 0.0, 3);
        p.noise_sigma_mv = 0.0;
        for (i, c) in p.channels.iter_mut().enumerate() {
            c.burst_rate_per_hr = 0.5 + i as f64;
        }
        let (spikes, bursts, _) = plan_events(&p);
        drop(spikes);
        for d in Direction::ALL {
            let expected = p.channels[d.index()].burst_rate_per_hr / 3600.0 * p.duration_s;
            let got = bursts.iter().filter(|b| b.direction == d).count() as f64;
            assert!((got - expected).abs() <= 3.0 * expected.sqrt(), "{d}: {got} vs {expected}");
        }
    }

    #[test]
    fn geometric_mean_matches() {
        let mut rng = stream(1, 1);
        let n = 200_000;
        let mean = (0..n).map(|_| geometric(&mut rng, 3.0) as f64).sum::<f64>() / n as f64;
        assert!((mean - 3.0).abs() < 0.05, "{mean}");
        assert_eq!(geometric(&mut rng, 1.0), 1);
    }

    #[test]
    fn invalid_params_rejected() {
        let mut p = SynthParams::default();
        p.propagation.match_prob[1] = 1.5;
        assert!(generate(&p).is_err());
        let p = SynthParams {
            duration_s: 500.0,
            ..SynthParams::default()
        };
        assert!(generate(&p).is_err());
        let p = SynthParams {
            coupling_mix: vec![0.1; 8],
            ..SynthParams::default()
        };
        assert!(generate(&p).is_err());
    }

    #[test]
    fn score_examples() {
        let (_, truth) = generate(&SynthParams::paper_regime(2)).unwrap();
        let perfect = score_detection(&truth_as_trains(&truth), &truth, 30.0).unwrap();
        assert_eq!(perfect.pooled.precision, Some(1.0));
        assert_eq!(perfect.pooled.recall, Some(1.0));

        let empty: Vec<SpikeTrain> = truth_as_trains(&truth)
            .into_iter()
            .map(|mut t| {
                t.spikes.clear();
                t
            })
            .collect();
        let s = score_detection(&empty, &truth, 30.0).unwrap();
        assert_eq!(s.pooled.precision, None);
        assert_eq!(s.pooled.recall, Some(0.0));
        assert!(score_detection(&empty, &truth, 0.0).is_err());
    }

    #[test]
    fn matching_is_one_to_one() {
        assert_eq!(match_onsets(&[100.0, 101.0], &[100.5], 30.0), 1);
        assert_eq!(match_onsets(&[100.0, 200.0], &[105.0, 195.0], 30.0), 2);
        assert_eq!(match_onsets(&[100.0], &[131.0], 30.0), 0);
        // both detections equidistant: the earlier one takes the truth spike
        assert_eq!(match_onsets(&[90.0, 110.0], &[100.0], 30.0), 1);
    }

    proptest! {
        #[test]
        fn self_match_is_perfect(seed in 0u64..50) {
            let mut p = SynthParams::paper_regime(seed);
            p.duration_s = 40_000.0;
            p.noise_sigma_mv = 0.0;
            let (_, truth) = generate(&p).unwrap();
            let s = score_detection(&truth_as_trains(&truth), &truth, 1.0).unwrap();
            prop_assert_eq!(s.pooled.n_matched, truth.spikes.len());
            if !truth.spikes.is_empty() {
                prop_assert_eq!(s.pooled.f1, Some(1.0));
            }
        }
    }
}
