//! Stage orchestration, cross-session pooling and report output.
//!
//! The pipeline runs as four stages, each with a serialisable,
//! schema-tagged output so it can be resumed from disk:
//!
//! | stage       | input                     | output schema         |
//! |-------------|---------------------------|-----------------------|
//! | `detect`    | recordings                | `starspike.detect`    |
//! | `analyze`   | detect document           | `starspike.analyze`   |
//! | `propagate` | analyze document          | `starspike.propagate` |
//! | `report`    | propagate documents       | `starspike.report`    |
//!
//! [`run_pipeline`] is exactly the composition of the four.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::config::{EchoEntry, PipelineConfig};
use crate::coupling::{
    correlation_matrix, pool_matrices, separation_decay, CorrelationMatrix, SeparationDecay,
};
use crate::error::{Error, Result};
use crate::events::{
    detect_spikes, direction_stats, group_bursts, isi_histogram, DirectionStats, IsiHistogram,
    SpikeTrain,
};
use crate::ingest::{detrend, load_recording, normalise, repair_gaps};
use crate::propagation::{
    burst_onsets, match_delays, polar_summary, summarize_propagation, DelayOutcome, DelayTable,
    PolarPoint, PropagationSummary,
};
use crate::stats;
use crate::synth::{score_detection, DetectionScore, GroundTruth};
use crate::types::{Burst, Direction, Recording, N_DIRECTIONS};

pub const SCHEMA_VERSION: u32 = 1;
pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

/// A document with a schema name, written inside a versioned envelope.
pub trait StageDocument: Serialize + DeserializeOwned {
    const SCHEMA: &'static str;
}

#[derive(Serialize)]
struct EnvelopeOut<'a, T> {
    schema: &'static str,
    schema_version: u32,
    tool_version: &'static str,
    body: &'a T,
}

#[derive(Deserialize)]
struct EnvelopeHeader {
    schema: Option<String>,
    schema_version: Option<u32>,
}

pub fn to_json<T: StageDocument>(doc: &T) -> String {
    let env = EnvelopeOut {
        schema: T::SCHEMA,
        schema_version: SCHEMA_VERSION,
        tool_version: TOOL_VERSION,
        body: doc,
    };
    let mut s = serde_json::to_string_pretty(&env).expect("stage documents always serialise");
    s.push('\n');
    s
}

/// Parses a stage document, checking its schema name and version first.
pub fn from_json<T: StageDocument>(text: &str) -> Result<T> {
    let mut value: serde_json::Value = serde_json::from_str(text).map_err(|e| Error::Malformed {
        what: format!("{} document", T::SCHEMA),
        message: e.to_string(),
    })?;
    let header: EnvelopeHeader =
        serde_json::from_value(value.clone()).map_err(|e| Error::Malformed {
            what: format!("{} document", T::SCHEMA),
            message: e.to_string(),
        })?;
    let found = format!(
        "{} v{}",
        header.schema.as_deref().unwrap_or("<none>"),
        header
            .schema_version
            .map(|v| v.to_string())
            .unwrap_or_else(|| "?".into())
    );
    if header.schema.as_deref() != Some(T::SCHEMA) || header.schema_version != Some(SCHEMA_VERSION) {
        return Err(Error::SchemaMismatch {
            expected: format!("{} v{}", T::SCHEMA, SCHEMA_VERSION),
            found,
        });
    }
    let body = value
        .get_mut("body")
        .map(serde_json::Value::take)
        .ok_or_else(|| Error::Malformed {
            what: format!("{} document", T::SCHEMA),
            message: "missing body".into(),
        })?;
    serde_json::from_value(body).map_err(|e| Error::Malformed {
        what: format!("{} document", T::SCHEMA),
        message: e.to_string(),
    })
}

pub fn read_document<T: StageDocument>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    from_json(&text).map_err(|e| match e {
        Error::Malformed { what, message } => Error::Malformed {
            what: format!("{} ({what})", path.display()),
            message,
        },
        Error::SchemaMismatch { expected, found } => Error::SchemaMismatch {
            expected,
            found: format!("{found} in {}", path.display()),
        },
        other => other,
    })
}

// ---------------------------------------------------------------- detect

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectedSession {
    pub session_id: String,
    pub sample_rate: f64,
    pub t0: f64,
    pub n_samples: usize,
    pub trains: Vec<SpikeTrain>,
    pub correlation: CorrelationMatrix,
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectOutput {
    pub config: PipelineConfig,
    pub sessions: Vec<DetectedSession>,
}

impl StageDocument for DetectOutput {
    const SCHEMA: &'static str = "starspike.detect";
}

/// Session id of an input file: its file stem.
pub fn session_id_of(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| path.display().to_string())
}

/// Detrends, detects and correlates one recording.
pub fn detect_recording(rec: &Recording, cfg: &PipelineConfig) -> Result<DetectedSession> {
    let a = &cfg.analysis;
    let sid = rec.session_id.as_str();
    let repaired = repair_gaps(rec, a.max_gap_interp_samples);
    let det = detrend(&repaired, a.detrend_window_s).map_err(|e| e.in_stage("ingest", sid))?;
    let trains = detect_spikes(&det, a).map_err(|e| e.in_stage("events", sid))?;
    let norm = normalise(&det);
    let correlation = correlation_matrix(&norm).map_err(|e| e.in_stage("coupling", sid))?;
    let mut warnings: Vec<String> = trains
        .iter()
        .filter(|t| t.flat)
        .map(|t| format!("channel {} is flat; no spikes searched", t.direction))
        .collect();
    warnings.extend(
        correlation
            .excluded
            .iter()
            .map(|d| format!("channel {d} excluded from correlation")),
    );
    Ok(DetectedSession {
        session_id: rec.session_id.clone(),
        sample_rate: rec.sample_rate,
        t0: rec.t0,
        n_samples: rec.len(),
        trains,
        correlation,
        warnings,
    })
}

fn check_unique<'a>(ids: impl Iterator<Item = &'a str>) -> Result<()> {
    let mut seen = BTreeSet::new();
    for id in ids {
        if !seen.insert(id) {
            return Err(Error::Malformed {
                what: "inputs".into(),
                message: format!("session id {id:?} appears more than once"),
            });
        }
    }
    Ok(())
}

pub fn detect_recordings(recs: &[Recording], cfg: &PipelineConfig) -> Result<DetectOutput> {
    cfg.validate()?;
    check_unique(recs.iter().map(|r| r.session_id.as_str()))?;
    let sessions = recs
        .par_iter()
        .map(|r| detect_recording(r, cfg))
        .collect::<Result<Vec<_>>>()?;
    Ok(DetectOutput {
        config: cfg.clone(),
        sessions,
    })
}

/// Loads and detects every input file; sessions run concurrently.
pub fn detect_files(inputs: &[PathBuf], cfg: &PipelineConfig) -> Result<DetectOutput> {
    cfg.validate()?;
    if inputs.is_empty() {
        return Err(Error::Malformed {
            what: "inputs".into(),
            message: "at least one recording is required".into(),
        });
    }
    let ids: Vec<String> = inputs.iter().map(|p| session_id_of(p)).collect();
    check_unique(ids.iter().map(String::as_str))?;
    let sessions = inputs
        .par_iter()
        .zip(ids.par_iter())
        .map(|(path, sid)| {
            let rec = load_recording(path, &cfg.columns, cfg.units)
                .map_err(|e| e.in_stage("ingest", &format!("{sid} ({})", path.display())))?;
            detect_recording(&rec, cfg)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(DetectOutput {
        config: cfg.clone(),
        sessions,
    })
}

// --------------------------------------------------------------- analyze

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AmplitudeHistogram {
    #[serde(rename = "bin_width_mV")]
    pub bin_width_mv: f64,
    /// Bin `i` covers `[i w, (i + 1) w)`.
    pub counts: Vec<usize>,
}

pub fn amplitude_histogram(amplitudes: &[f64], bin_width_mv: f64) -> AmplitudeHistogram {
    let max = amplitudes.iter().copied().fold(0.0, f64::max);
    let n_bins = (max / bin_width_mv).floor() as usize + usize::from(!amplitudes.is_empty());
    let mut counts = vec![0; n_bins];
    for &a in amplitudes {
        counts[((a / bin_width_mv).floor() as usize).min(n_bins - 1)] += 1;
    }
    AmplitudeHistogram {
        bin_width_mv,
        counts,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BurstSummary {
    pub direction: Direction,
    pub n_bursts: usize,
    pub mean_size: Option<f64>,
    pub median_duration_s: Option<f64>,
}

fn burst_summary(direction: Direction, bursts: &[Burst]) -> BurstSummary {
    let sizes: Vec<f64> = bursts.iter().map(|b| b.size as f64).collect();
    let durations: Vec<f64> = bursts.iter().map(|b| b.duration_s).collect();
    BurstSummary {
        direction,
        n_bursts: bursts.len(),
        mean_size: stats::mean(&sizes),
        median_duration_s: stats::median(&durations),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalyzedSession {
    #[serde(flatten)]
    pub detected: DetectedSession,
    pub stats: Vec<DirectionStats>,
    /// Compass order, then onset.
    pub bursts: Vec<Burst>,
    pub burst_summary: Vec<BurstSummary>,
    /// Intervals of all directions, short scale.
    pub isi_short: IsiHistogram,
    pub isi_long: IsiHistogram,
    pub amplitude_histogram: AmplitudeHistogram,
    pub rate_polar: Vec<PolarPoint>,
    pub decay: SeparationDecay,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalyzeOutput {
    pub config: PipelineConfig,
    pub sessions: Vec<AnalyzedSession>,
}

impl StageDocument for AnalyzeOutput {
    const SCHEMA: &'static str = "starspike.analyze";
}

fn isi_pair(stats: &[DirectionStats], cfg: &PipelineConfig) -> Result<(IsiHistogram, IsiHistogram)> {
    let isis: Vec<f64> = stats.iter().flat_map(|s| s.isi_list_s.iter().copied()).collect();
    let r = &cfg.report;
    Ok((
        isi_histogram(&isis, r.isi_short_bin_s, r.isi_short_max_s)?,
        isi_histogram(&isis, r.isi_long_bin_s, r.isi_long_max_s)?,
    ))
}

fn rate_polar(stats: &[DirectionStats]) -> Vec<PolarPoint> {
    let rates: Vec<(Direction, f64)> = stats.iter().map(|s| (s.direction, s.rate_per_min)).collect();
    polar_summary(&rates)
}

pub fn analyze_session(d: DetectedSession, cfg: &PipelineConfig) -> Result<AnalyzedSession> {
    let sid = d.session_id.clone();
    let stats: Vec<DirectionStats> = d.trains.iter().map(direction_stats).collect();
    let per_direction: Vec<Vec<Burst>> = d
        .trains
        .iter()
        .map(|t| group_bursts(t, cfg.analysis.burst_gap_s))
        .collect();
    let burst_summary = d
        .trains
        .iter()
        .zip(&per_direction)
        .map(|(t, b)| burst_summary(t.direction, b))
        .collect();
    let (isi_short, isi_long) = isi_pair(&stats, cfg).map_err(|e| e.in_stage("events", &sid))?;
    let amplitudes: Vec<f64> = d
        .trains
        .iter()
        .flat_map(|t| t.spikes.iter().map(|s| s.amplitude_mv))
        .collect();
    Ok(AnalyzedSession {
        amplitude_histogram: amplitude_histogram(&amplitudes, cfg.report.amplitude_bin_mv),
        rate_polar: rate_polar(&stats),
        decay: separation_decay(&d.correlation, cfg.analysis.separation_metric),
        stats,
        bursts: per_direction.into_iter().flatten().collect(),
        burst_summary,
        isi_short,
        isi_long,
        detected: d,
    })
}

pub fn analyze(doc: &DetectOutput, cfg: &PipelineConfig) -> Result<AnalyzeOutput> {
    cfg.validate()?;
    let sessions = doc
        .sessions
        .par_iter()
        .map(|s| analyze_session(s.clone(), cfg))
        .collect::<Result<Vec<_>>>()?;
    Ok(AnalyzeOutput {
        config: cfg.clone(),
        sessions,
    })
}

// ------------------------------------------------------------- propagate

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PropagatedSession {
    #[serde(flatten)]
    pub analyzed: AnalyzedSession,
    pub delays: DelayTable,
    pub propagation: PropagationSummary,
    pub delay_polar: Vec<PolarPoint>,
}

impl PropagatedSession {
    pub fn session_id(&self) -> &str {
        &self.analyzed.detected.session_id
    }

    pub fn trains(&self) -> &[SpikeTrain] {
        &self.analyzed.detected.trains
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PropagateOutput {
    pub config: PipelineConfig,
    pub sessions: Vec<PropagatedSession>,
}

impl StageDocument for PropagateOutput {
    const SCHEMA: &'static str = "starspike.propagate";
}

fn delay_polar(summary: &PropagationSummary) -> Vec<PolarPoint> {
    let medians: Vec<(Direction, f64)> = summary
        .directions
        .iter()
        .filter_map(|d| d.median_delay_s.map(|m| (d.direction, m)))
        .collect();
    polar_summary(&medians)
}

pub fn propagate_session(a: AnalyzedSession, cfg: &PipelineConfig) -> Result<PropagatedSession> {
    let reference = cfg.analysis.reference_direction;
    let ref_bursts: Vec<Burst> = a
        .bursts
        .iter()
        .filter(|b| b.direction == reference)
        .cloned()
        .collect();
    let delays = match_delays(
        &burst_onsets(&ref_bursts),
        &a.detected.trains,
        cfg.analysis.propagation_window_s,
        reference,
    )
    .map_err(|e| e.in_stage("propagation", &a.detected.session_id))?;
    let propagation = summarize_propagation(&delays);
    Ok(PropagatedSession {
        delay_polar: delay_polar(&propagation),
        analyzed: a,
        delays,
        propagation,
    })
}

pub fn propagate(doc: &AnalyzeOutput, cfg: &PipelineConfig) -> Result<PropagateOutput> {
    cfg.validate()?;
    let sessions = doc
        .sessions
        .par_iter()
        .map(|s| propagate_session(s.clone(), cfg))
        .collect::<Result<Vec<_>>>()?;
    Ok(PropagateOutput {
        config: cfg.clone(),
        sessions,
    })
}

// ----------------------------------------------------------------- score

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionScore {
    pub session_id: String,
    pub score: DetectionScore,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreOutput {
    pub sessions: Vec<SessionScore>,
}

impl StageDocument for ScoreOutput {
    const SCHEMA: &'static str = "starspike.score";
}

/// Planted ground truth as written next to a synthetic recording.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TruthDocument {
    pub truth: GroundTruth,
}

impl StageDocument for TruthDocument {
    const SCHEMA: &'static str = "starspike.truth";
}

/// Scores each truth against the detected session of the same id.
pub fn score_sessions<'a>(
    sessions: impl Iterator<Item = (&'a str, &'a [SpikeTrain])> + Clone,
    truths: &[GroundTruth],
    tol_s: f64,
) -> Result<Vec<SessionScore>> {
    truths
        .iter()
        .map(|truth| {
            let sid = truth.params.session_id.as_str();
            let (_, trains) = sessions.clone().find(|(id, _)| *id == sid).ok_or_else(|| {
                Error::Malformed {
                    what: "ground truth".into(),
                    message: format!("no detected session named {sid:?}"),
                }
            })?;
            Ok(SessionScore {
                session_id: sid.to_string(),
                score: score_detection(trains, truth, tol_s)?,
            })
        })
        .collect()
}

pub fn score(doc: &DetectOutput, truths: &[GroundTruth], tol_s: f64) -> Result<ScoreOutput> {
    let sessions = score_sessions(
        doc.sessions
            .iter()
            .map(|s| (s.session_id.as_str(), s.trains.as_slice())),
        truths,
        tol_s,
    )?;
    Ok(ScoreOutput { sessions })
}

// ---------------------------------------------------------------- report

/// Decisions that shape every number in a report.
pub const CONVENTIONS: &[&str] = &[
    "direction index: N = 0, increasing clockwise in 45 degree steps",
    "voltages in mV",
    "baseline: centred moving median over valid samples, window shrinks symmetrically at the edges",
    "detection on |residual|; amplitude is the magnitude of the residual peak",
    "dispersion: 1.4826 x median absolute deviation of valid residuals",
    "spike onset and offset: first sample at or above threshold and one sample past the last",
    "ISI: onset to onset, within one session",
    "burst split: gap from latest offset to next onset exceeds burst_gap_s",
    "propagation match: first target onset in [t, t + window_s], both ends inclusive",
    "propagation: every reference burst onset is matched independently",
    "quantiles: linear interpolation between order statistics, h = (n - 1) p",
    "variance and sd: population (divide by n)",
    "correlation: per session over jointly valid samples; pooled matrix is the element-wise mean",
    "pooled statistics: events concatenated across sessions",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportMetadata {
    pub tool_version: String,
    pub session_ids: Vec<String>,
    pub config: Vec<EchoEntry>,
    pub conventions: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RateSpread {
    pub direction: Direction,
    /// Mean and sd of the per-session rates.
    pub session_mean_per_min: f64,
    pub session_sd_per_min: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PooledSection {
    pub session_ids: Vec<String>,
    pub stats: Vec<DirectionStats>,
    pub rate_spread: Vec<RateSpread>,
    pub rate_polar: Vec<PolarPoint>,
    pub burst_summary: Vec<BurstSummary>,
    pub isi_short: IsiHistogram,
    pub isi_long: IsiHistogram,
    pub amplitude_histogram: AmplitudeHistogram,
    pub correlation: CorrelationMatrix,
    pub decay: SeparationDecay,
    pub propagation: PropagationSummary,
    pub delay_polar: Vec<PolarPoint>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportBundle {
    pub metadata: ReportMetadata,
    pub sessions: Vec<PropagatedSession>,
    pub pooled: PooledSection,
    pub detection_quality: Option<Vec<SessionScore>>,
}

impl StageDocument for ReportBundle {
    const SCHEMA: &'static str = "starspike.report";
}

/// Statistics of several sessions' trains of one direction, computed on
/// the concatenated events. Intervals never span two sessions.
pub fn pooled_direction_stats(trains: &[&SpikeTrain]) -> Option<DirectionStats> {
    let direction = trains.first()?.direction;
    let per_session: Vec<DirectionStats> = trains.iter().map(|t| direction_stats(t)).collect();
    let spike_count: usize = per_session.iter().map(|s| s.spike_count).sum();
    let observed: f64 = per_session.iter().map(|s| s.observed_duration_s).sum();
    let amplitudes: Vec<f64> = trains
        .iter()
        .flat_map(|t| t.spikes.iter().map(|s| s.amplitude_mv))
        .collect();
    Some(DirectionStats {
        direction,
        spike_count,
        rate_per_min: if observed > 0.0 {
            spike_count as f64 / (observed / 60.0)
        } else {
            0.0
        },
        observed_duration_s: observed,
        amplitude_quartiles_mv: stats::quartiles(&amplitudes),
        amplitude_max_mv: amplitudes.iter().copied().reduce(f64::max),
        isi_list_s: per_session.into_iter().flat_map(|s| s.isi_list_s).collect(),
    })
}

fn pool(sessions: &[PropagatedSession], cfg: &PipelineConfig) -> Result<PooledSection> {
    let session_ids: Vec<String> = sessions.iter().map(|s| s.session_id().to_string()).collect();
    let mut pooled_stats = Vec::with_capacity(N_DIRECTIONS);
    let mut rate_spread = Vec::with_capacity(N_DIRECTIONS);
    let mut bursts_summary = Vec::with_capacity(N_DIRECTIONS);
    for d in Direction::ALL {
        let trains: Vec<&SpikeTrain> = sessions
            .iter()
            .flat_map(|s| s.trains().iter().filter(move |t| t.direction == d))
            .collect();
        if let Some(st) = pooled_direction_stats(&trains) {
            pooled_stats.push(st);
        }
        let rates: Vec<f64> = sessions
            .iter()
            .flat_map(|s| s.analyzed.stats.iter().filter(move |x| x.direction == d))
            .map(|x| x.rate_per_min)
            .collect();
        if let (Some(m), Some(sd)) = (stats::mean(&rates), stats::std_dev(&rates)) {
            rate_spread.push(RateSpread {
                direction: d,
                session_mean_per_min: m,
                session_sd_per_min: sd,
            });
        }
        let bursts: Vec<Burst> = sessions
            .iter()
            .flat_map(|s| s.analyzed.bursts.iter().filter(|b| b.direction == d).cloned())
            .collect();
        bursts_summary.push(burst_summary(d, &bursts));
    }
    let (isi_short, isi_long) = isi_pair(&pooled_stats, cfg)?;
    let amplitudes: Vec<f64> = sessions
        .iter()
        .flat_map(|s| s.trains().iter())
        .flat_map(|t| t.spikes.iter().map(|s| s.amplitude_mv))
        .collect();
    let matrices: Vec<&CorrelationMatrix> =
        sessions.iter().map(|s| &s.analyzed.detected.correlation).collect();
    let correlation = pool_matrices(&matrices).ok_or(Error::InsufficientCoverage)?;
    let tables: Vec<&DelayTable> = sessions.iter().map(|s| &s.delays).collect();
    let delays = DelayTable::concat(&tables).unwrap_or(DelayTable {
        reference: cfg.analysis.reference_direction,
        window_s: cfg.analysis.propagation_window_s,
        events: Vec::new(),
    });
    let propagation = summarize_propagation(&delays);
    Ok(PooledSection {
        session_ids,
        rate_polar: rate_polar(&pooled_stats),
        stats: pooled_stats,
        rate_spread,
        burst_summary: bursts_summary,
        isi_short,
        isi_long,
        amplitude_histogram: amplitude_histogram(&amplitudes, cfg.report.amplitude_bin_mv),
        decay: separation_decay(&correlation, cfg.analysis.separation_metric),
        correlation,
        delay_polar: delay_polar(&propagation),
        propagation,
    })
}

/// Assembles the final report from one or more propagate documents.
pub fn report(
    docs: &[PropagateOutput],
    cfg: &PipelineConfig,
    truths: &[GroundTruth],
) -> Result<ReportBundle> {
    cfg.validate()?;
    if let Some(first) = docs.first() {
        if docs.iter().any(|d| d.config.analysis != first.config.analysis) {
            return Err(Error::Config(
                "inputs were produced with different analysis settings".into(),
            ));
        }
    }
    let sessions: Vec<PropagatedSession> =
        docs.iter().flat_map(|d| d.sessions.iter().cloned()).collect();
    if sessions.is_empty() {
        return Err(Error::Malformed {
            what: "inputs".into(),
            message: "no sessions to report".into(),
        });
    }
    check_unique(sessions.iter().map(|s| s.session_id()))?;
    let pooled = pool(&sessions, cfg).map_err(|e| e.in_stage("report", "pooled"))?;
    let detection_quality = if truths.is_empty() {
        None
    } else {
        Some(score_sessions(
            sessions.iter().map(|s| (s.session_id(), s.trains())),
            truths,
            cfg.report.score_tolerance_s,
        )?)
    };
    Ok(ReportBundle {
        metadata: ReportMetadata {
            tool_version: TOOL_VERSION.to_string(),
            session_ids: pooled.session_ids.clone(),
            config: cfg.echo(),
            conventions: CONVENTIONS.iter().map(|s| s.to_string()).collect(),
        },
        sessions,
        pooled,
        detection_quality,
    })
}

/// Composes all stages in memory.
pub fn run_pipeline(
    inputs: &[PathBuf],
    cfg: &PipelineConfig,
    truths: &[GroundTruth],
) -> Result<ReportBundle> {
    let detected = detect_files(inputs, cfg)?;
    run_from_detect(&detected, cfg, truths)
}

pub fn run_recordings(
    recs: &[Recording],
    cfg: &PipelineConfig,
    truths: &[GroundTruth],
) -> Result<ReportBundle> {
    let detected = detect_recordings(recs, cfg)?;
    run_from_detect(&detected, cfg, truths)
}

fn run_from_detect(
    detected: &DetectOutput,
    cfg: &PipelineConfig,
    truths: &[GroundTruth],
) -> Result<ReportBundle> {
    let analyzed = analyze(detected, cfg)?;
    let propagated = propagate(&analyzed, cfg)?;
    report(&[propagated], cfg, truths)
}

// ---------------------------------------------------------------- tables

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

struct Table {
    out: String,
}

impl Table {
    fn new(header: &[&str]) -> Self {
        let mut out = header.join(",");
        out.push('\n');
        Table { out }
    }

    fn row(&mut self, cells: &[String]) {
        let _ = writeln!(self.out, "{}", cells.join(","));
    }
}

/// Scope column values: each session id, then `pooled`.
fn scopes(b: &ReportBundle) -> Vec<(String, ScopeView<'_>)> {
    let mut v: Vec<(String, ScopeView<'_>)> = b
        .sessions
        .iter()
        .map(|s| {
            let a = &s.analyzed;
            (
                s.session_id().to_string(),
                ScopeView {
                    stats: &a.stats,
                    rate_polar: &a.rate_polar,
                    bursts: &a.burst_summary,
                    isi_short: &a.isi_short,
                    isi_long: &a.isi_long,
                    amplitudes: &a.amplitude_histogram,
                    correlation: &a.detected.correlation,
                    decay: &a.decay,
                    propagation: &s.propagation,
                    delay_polar: &s.delay_polar,
                },
            )
        })
        .collect();
    let p = &b.pooled;
    v.push((
        "pooled".to_string(),
        ScopeView {
            stats: &p.stats,
            rate_polar: &p.rate_polar,
            bursts: &p.burst_summary,
            isi_short: &p.isi_short,
            isi_long: &p.isi_long,
            amplitudes: &p.amplitude_histogram,
            correlation: &p.correlation,
            decay: &p.decay,
            propagation: &p.propagation,
            delay_polar: &p.delay_polar,
        },
    ));
    v
}

struct ScopeView<'a> {
    stats: &'a [DirectionStats],
    rate_polar: &'a [PolarPoint],
    bursts: &'a [BurstSummary],
    isi_short: &'a IsiHistogram,
    isi_long: &'a IsiHistogram,
    amplitudes: &'a AmplitudeHistogram,
    correlation: &'a CorrelationMatrix,
    decay: &'a SeparationDecay,
    propagation: &'a PropagationSummary,
    delay_polar: &'a [PolarPoint],
}

fn isi_rows(t: &mut Table, scope: &str, h: &IsiHistogram) {
    for (i, c) in h.counts.iter().enumerate() {
        let lo = i as f64 * h.bin_width_s;
        t.row(&[
            scope.to_string(),
            lo.to_string(),
            (lo + h.bin_width_s).min(h.max_s).to_string(),
            c.to_string(),
        ]);
    }
    t.row(&[
        scope.to_string(),
        h.max_s.to_string(),
        "inf".to_string(),
        h.overflow.to_string(),
    ]);
}

fn polar_rows(t: &mut Table, scope: &str, points: &[PolarPoint]) {
    for p in points {
        t.row(&[
            scope.to_string(),
            p.direction.to_string(),
            p.angle_deg.to_string(),
            opt(p.value),
        ]);
    }
}

/// One delimited table per figure-equivalent, as `(file name, contents)`.
pub fn report_tables(b: &ReportBundle) -> Vec<(String, String)> {
    let scoped = scopes(b);
    let mut rates = Table::new(&[
        "scope",
        "direction",
        "spike_count",
        "observed_duration_s",
        "rate_per_min",
        "session_sd_rate_per_min",
    ]);
    let mut rates_polar = Table::new(&["scope", "direction", "angle_deg", "rate_per_min"]);
    let mut amp_box = Table::new(&[
        "scope",
        "direction",
        "n",
        "q1_amplitude_mV",
        "median_amplitude_mV",
        "q3_amplitude_mV",
        "max_amplitude_mV",
    ]);
    let mut amp_hist = Table::new(&["scope", "bin_lo_mV", "bin_hi_mV", "count"]);
    let mut isi_1h = Table::new(&["scope", "bin_lo_s", "bin_hi_s", "count"]);
    let mut isi_10h = Table::new(&["scope", "bin_lo_s", "bin_hi_s", "count"]);
    let mut burst_summary = Table::new(&[
        "scope",
        "direction",
        "n_bursts",
        "mean_size",
        "median_duration_s",
    ]);
    let mut corr = Table::new(&["scope", "i_label", "j_label", "r", "n_overlap"]);
    let mut decay = Table::new(&["scope", "metric", "s", "mean_r", "sd_r", "n_pairs"]);
    let mut delay_iqr = Table::new(&[
        "scope",
        "reference",
        "direction",
        "median_delay_s",
        "q1_delay_s",
        "q3_delay_s",
        "match_rate",
        "n_events",
        "n_reference",
    ]);
    let mut delay_polar = Table::new(&["scope", "direction", "angle_deg", "median_delay_s"]);
    let mut match_rates = Table::new(&["scope", "direction", "match_rate", "n_events", "n_reference"]);

    for (scope, v) in &scoped {
        let sd = |d: Direction| {
            if scope == "pooled" {
                b.pooled
                    .rate_spread
                    .iter()
                    .find(|r| r.direction == d)
                    .map(|r| r.session_sd_per_min.to_string())
                    .unwrap_or_default()
            } else {
                String::new()
            }
        };
        for s in v.stats {
            rates.row(&[
                scope.clone(),
                s.direction.to_string(),
                s.spike_count.to_string(),
                s.observed_duration_s.to_string(),
                s.rate_per_min.to_string(),
                sd(s.direction),
            ]);
            let q = s.amplitude_quartiles_mv;
            amp_box.row(&[
                scope.clone(),
                s.direction.to_string(),
                s.spike_count.to_string(),
                opt(q.map(|q| q.0)),
                opt(q.map(|q| q.1)),
                opt(q.map(|q| q.2)),
                opt(s.amplitude_max_mv),
            ]);
        }
        polar_rows(&mut rates_polar, scope, v.rate_polar);
        for (i, c) in v.amplitudes.counts.iter().enumerate() {
            let w = v.amplitudes.bin_width_mv;
            amp_hist.row(&[
                scope.clone(),
                (i as f64 * w).to_string(),
                ((i + 1) as f64 * w).to_string(),
                c.to_string(),
            ]);
        }
        isi_rows(&mut isi_1h, scope, v.isi_short);
        isi_rows(&mut isi_10h, scope, v.isi_long);
        for bs in v.bursts {
            burst_summary.row(&[
                scope.clone(),
                bs.direction.to_string(),
                bs.n_bursts.to_string(),
                opt(bs.mean_size),
                opt(bs.median_duration_s),
            ]);
        }
        for i in Direction::ALL {
            for j in Direction::ALL {
                corr.row(&[
                    scope.clone(),
                    i.to_string(),
                    j.to_string(),
                    opt(v.correlation.get(i, j)),
                    v.correlation.n_overlap[i.index()][j.index()].to_string(),
                ]);
            }
        }
        for p in &v.decay.points {
            decay.row(&[
                scope.clone(),
                v.decay.metric.to_string(),
                p.separation.to_string(),
                opt(p.mean_r),
                opt(p.sd_r),
                p.n_pairs.to_string(),
            ]);
        }
        for d in &v.propagation.directions {
            delay_iqr.row(&[
                scope.clone(),
                v.propagation.reference.to_string(),
                d.direction.to_string(),
                opt(d.median_delay_s),
                opt(d.iqr_s.map(|q| q.0)),
                opt(d.iqr_s.map(|q| q.1)),
                opt(d.match_rate),
                d.n_events.to_string(),
                d.n_reference.to_string(),
            ]);
            match_rates.row(&[
                scope.clone(),
                d.direction.to_string(),
                opt(d.match_rate),
                d.n_events.to_string(),
                d.n_reference.to_string(),
            ]);
        }
        polar_rows(&mut delay_polar, scope, v.delay_polar);
    }

    let mut spikes = Table::new(&[
        "session",
        "direction",
        "onset_s",
        "peak_s",
        "offset_s",
        "amplitude_mV",
        "duration_s",
    ]);
    let mut bursts = Table::new(&["session", "direction", "onset_s", "duration_s", "size"]);
    let mut delays = Table::new(&[
        "session",
        "reference",
        "reference_onset_s",
        "direction",
        "matched",
        "delay_s",
    ]);
    for s in &b.sessions {
        let sid = s.session_id();
        for t in s.trains() {
            for e in &t.spikes {
                spikes.row(&[
                    sid.to_string(),
                    e.direction.to_string(),
                    e.onset_s.to_string(),
                    e.peak_s.to_string(),
                    e.offset_s.to_string(),
                    e.amplitude_mv.to_string(),
                    e.duration_s.to_string(),
                ]);
            }
        }
        for bu in &s.analyzed.bursts {
            bursts.row(&[
                sid.to_string(),
                bu.direction.to_string(),
                bu.onset_s.to_string(),
                bu.duration_s.to_string(),
                bu.size.to_string(),
            ]);
        }
        for ev in &s.delays.events {
            for (d, o) in &ev.outcomes {
                delays.row(&[
                    sid.to_string(),
                    s.delays.reference.to_string(),
                    ev.onset_s.to_string(),
                    d.to_string(),
                    matches!(o, DelayOutcome::Matched { .. }).to_string(),
                    opt(o.delay()),
                ]);
            }
        }
    }

    let mut out = vec![
        ("rates.csv", rates),
        ("rates_polar.csv", rates_polar),
        ("amplitude_box.csv", amp_box),
        ("amplitude_histogram.csv", amp_hist),
        ("isi_1h.csv", isi_1h),
        ("isi_10h.csv", isi_10h),
        ("burst_summary.csv", burst_summary),
        ("bursts.csv", bursts),
        ("spikes.csv", spikes),
        ("correlation_matrix.csv", corr),
        ("correlation_decay.csv", decay),
        ("delay_iqr.csv", delay_iqr),
        ("delays.csv", delays),
        ("delay_polar.csv", delay_polar),
        ("match_rates.csv", match_rates),
    ];
    if let Some(q) = &b.detection_quality {
        let mut t = Table::new(&[
            "session",
            "direction",
            "n_truth",
            "n_detected",
            "n_matched",
            "precision",
            "recall",
            "f1",
        ]);
        for s in q {
            let rows = s
                .score
                .directions
                .iter()
                .map(|d| (d.direction.to_string(), &d.score))
                .chain(std::iter::once(("all".to_string(), &s.score.pooled)));
            for (label, sc) in rows {
                t.row(&[
                    s.session_id.clone(),
                    label,
                    sc.n_truth.to_string(),
                    sc.n_detected.to_string(),
                    sc.n_matched.to_string(),
                    opt(sc.precision),
                    opt(sc.recall),
                    opt(sc.f1),
                ]);
            }
        }
        out.push(("detection_quality.csv", t));
    }
    out.into_iter()
        .map(|(name, t)| (format!("tables/{name}"), t.out))
        .collect()
}

/// Every file of a report directory: the structured document and the
/// tables. The volatile run header is written separately.
pub fn report_files(b: &ReportBundle) -> Vec<(String, Vec<u8>)> {
    let mut files = vec![("report.json".to_string(), to_json(b).into_bytes())];
    files.extend(
        report_tables(b)
            .into_iter()
            .map(|(name, body)| (name, body.into_bytes())),
    );
    files
}

// ---------------------------------------------------------------- output

/// Writes all files under `dir` or none of them: each goes to a temporary
/// sibling first and is renamed only after every write succeeded.
pub fn write_atomically(dir: &Path, files: &[(String, Vec<u8>)]) -> Result<()> {
    let mut staged: Vec<(PathBuf, PathBuf)> = Vec::with_capacity(files.len());
    let cleanup = |staged: &[(PathBuf, PathBuf)]| {
        for (tmp, _) in staged {
            let _ = fs::remove_file(tmp);
        }
    };
    for (name, body) in files {
        let target = dir.join(name);
        let parent = target.parent().unwrap_or(dir).to_path_buf();
        let file_name = target
            .file_name()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default();
        let tmp = parent.join(format!(".{file_name}.partial-{}", std::process::id()));
        let res = fs::create_dir_all(&parent)
            .map_err(|e| Error::io(&parent, e))
            .and_then(|_| fs::write(&tmp, body).map_err(|e| Error::io(&tmp, e)));
        if let Err(e) = res {
            cleanup(&staged);
            let _ = fs::remove_file(&tmp);
            return Err(e);
        }
        staged.push((tmp, target));
    }
    for (i, (tmp, target)) in staged.iter().enumerate() {
        if let Err(e) = fs::rename(tmp, target) {
            cleanup(&staged[i..]);
            for (_, done) in &staged[..i] {
                let _ = fs::remove_file(done);
            }
            return Err(Error::io(target, e));
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{generate, SynthParams};

    fn small_session(id: &str, seed: u64) -> (Recording, GroundTruth) {
        let mut p = SynthParams::paper_regime(seed);
        p.duration_s = 20_000.0;
        p.session_id = id.to_string();
        generate(&p).unwrap()
    }

    #[test]
    fn envelope_round_trip_and_mismatch() {
        let (rec, _) = small_session("a", 1);
        let det = detect_recordings(&[rec], &PipelineConfig::default()).unwrap();
        let json = to_json(&det);
        let back: DetectOutput = from_json(&json).unwrap();
        assert_eq!(back, det);
        let err = from_json::<AnalyzeOutput>(&json).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("starspike.analyze v1") && msg.contains("starspike.detect v1"), "{msg}");
        assert!(matches!(
            from_json::<DetectOutput>("{\"schema\": 3}"),
            Err(Error::Malformed { .. })
        ));
        assert!(matches!(
            from_json::<DetectOutput>("{}"),
            Err(Error::SchemaMismatch { .. })
        ));
    }

    #[test]
    fn amplitude_histogram_bins() {
        let h = amplitude_histogram(&[0.5, 2.0, 3.9, 4.0], 2.0);
        assert_eq!(h.counts, vec![1, 2, 1]);
        assert!(amplitude_histogram(&[], 2.0).counts.is_empty());
    }

    #[test]
    fn pooled_stats_concatenate_events() {
        let (r1, _) = small_session("a", 3);
        let (r2, _) = small_session("b", 4);
        let b = run_recordings(&[r1, r2], &PipelineConfig::default(), &[]).unwrap();
        assert_eq!(b.pooled.session_ids, vec!["a", "b"]);
        for d in Direction::ALL {
            let total: usize = b
                .sessions
                .iter()
                .map(|s| s.analyzed.stats[d.index()].spike_count)
                .sum();
            assert_eq!(b.pooled.stats[d.index()].spike_count, total);
        }
        let refs: usize = b.sessions.iter().map(|s| s.delays.events.len()).sum();
        assert!(b
            .pooled
            .propagation
            .directions
            .iter()
            .all(|d| d.n_reference == refs));
    }

    #[test]
    fn duplicate_sessions_rejected() {
        let (r, _) = small_session("a", 5);
        assert!(detect_recordings(&[r.clone(), r], &PipelineConfig::default()).is_err());
    }

    #[test]
    fn tables_have_units_and_rows() {
        let (r, truth) = small_session("a", 6);
        let b = run_recordings(&[r], &PipelineConfig::default(), &[truth]).unwrap();
        let tables = report_tables(&b);
        let names: Vec<&str> = tables.iter().map(|(n, _)| n.as_str()).collect();
        assert!(names.contains(&"tables/detection_quality.csv"));
        let corr = &tables.iter().find(|(n, _)| n.ends_with("correlation_matrix.csv")).unwrap().1;
        // header plus 64 cells for the session and 64 pooled
        assert_eq!(corr.lines().count(), 1 + 128);
        let spikes = &tables.iter().find(|(n, _)| n.ends_with("spikes.csv")).unwrap().1;
        assert!(spikes.starts_with("session,direction,onset_s,peak_s,offset_s,amplitude_mV,duration_s\n"));
    }

    #[test]
    fn atomic_write_leaves_nothing_on_failure() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("blocker"), b"x").unwrap();
        let files = vec![
            ("ok.txt".to_string(), b"1".to_vec()),
            ("blocker/inner.txt".to_string(), b"2".to_vec()),
        ];
        assert!(write_atomically(dir.path(), &files).is_err());
        let left: Vec<_> = fs::read_dir(dir.path()).unwrap().map(|e| e.unwrap().file_name()).collect();
        assert_eq!(left, vec![std::ffi::OsString::from("blocker")]);
        write_atomically(dir.path(), &files[..1]).unwrap();
        assert_eq!(fs::read(dir.path().join("ok.txt")).unwrap(), b"1");
    }
}
