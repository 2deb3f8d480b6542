//! Pipeline configuration: every tunable with its default, read from a
//! sectioned key-value file and overridable per key.
//!
//! ```toml
//! [ingest]
//! units = "mV"
//! detrend_window_s = 3600
//! max_gap_interp_samples = 5
//!
//! [ingest.columns]
//! time = "t"
//! N = "ch1"
//!
//! [events]
//! dispersion_k = 4.0
//! min_spike_duration_s = 30
//! merge_gap_s = 10
//! burst_gap_s = 600
//!
//! [coupling]
//! separation_metric = "linear"
//!
//! [propagation]
//! window_s = 3600
//! reference_direction = "E"
//!
//! [report]
//! isi_short_bin_s = 60
//! ```
//!
//! Precedence is flags over file over defaults; the source of each value is
//! kept and echoed in every report.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::coupling::MIN_OVERLAP;
use crate::error::{Error, Result};
use crate::events::MIN_DISPERSION_SAMPLES;
use crate::ingest::{ColumnMap, VoltageUnit};
use crate::types::{AnalysisConfig, Direction};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ValueSource {
    Default,
    File,
    Flag,
}

impl fmt::Display for ValueSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ValueSource::Default => "default",
            ValueSource::File => "file",
            ValueSource::Flag => "flag",
        })
    }
}

/// Binning of the plot-ready histogram tables and the scoring tolerance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportParams {
    pub isi_short_bin_s: f64,
    pub isi_short_max_s: f64,
    pub isi_long_bin_s: f64,
    pub isi_long_max_s: f64,
    #[serde(rename = "amplitude_bin_mV")]
    pub amplitude_bin_mv: f64,
    pub score_tolerance_s: f64,
}

impl Default for ReportParams {
    fn default() -> Self {
        ReportParams {
            isi_short_bin_s: 60.0,
            isi_short_max_s: 3_600.0,
            isi_long_bin_s: 600.0,
            isi_long_max_s: 36_000.0,
            amplitude_bin_mv: 2.0,
            score_tolerance_s: 30.0,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub analysis: AnalysisConfig,
    pub units: VoltageUnit,
    pub columns: ColumnMap,
    pub report: ReportParams,
    /// Where each non-default key came from.
    pub sources: BTreeMap<String, ValueSource>,
}

/// One line of the configuration echo.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EchoEntry {
    pub key: String,
    pub value: String,
    pub source: String,
}

fn parse_f64(key: &str, raw: &str) -> Result<f64> {
    raw.trim()
        .parse::<f64>()
        .ok()
        .filter(|v| v.is_finite())
        .ok_or_else(|| Error::Config(format!("{key}: expected a number, got {raw:?}")))
}

fn parse_usize(key: &str, raw: &str) -> Result<usize> {
    raw.trim()
        .parse::<usize>()
        .map_err(|_| Error::Config(format!("{key}: expected a non-negative integer, got {raw:?}")))
}

impl PipelineConfig {
    /// Every settable key, in echo order.
    pub fn keys() -> Vec<String> {
        let mut keys: Vec<String> = [
            "ingest.units",
            "ingest.detrend_window_s",
            "ingest.max_gap_interp_samples",
            "ingest.columns.time",
        ]
        .iter()
        .map(|s| s.to_string())
        .collect();
        keys.extend(Direction::ALL.iter().map(|d| format!("ingest.columns.{d}")));
        keys.extend(
            [
                "events.dispersion_k",
                "events.min_spike_duration_s",
                "events.merge_gap_s",
                "events.burst_gap_s",
                "coupling.separation_metric",
                "propagation.window_s",
                "propagation.reference_direction",
                "report.isi_short_bin_s",
                "report.isi_short_max_s",
                "report.isi_long_bin_s",
                "report.isi_long_max_s",
                "report.amplitude_bin_mV",
                "report.score_tolerance_s",
            ]
            .iter()
            .map(|s| s.to_string()),
        );
        keys
    }

    /// Sets one key from its textual value.
    pub fn set(&mut self, key: &str, raw: &str, source: ValueSource) -> Result<()> {
        let a = &mut self.analysis;
        let r = &mut self.report;
        match key {
            "ingest.units" => self.units = VoltageUnit::from_str(raw)?,
            "ingest.detrend_window_s" => a.detrend_window_s = parse_f64(key, raw)?,
            "ingest.max_gap_interp_samples" => a.max_gap_interp_samples = parse_usize(key, raw)?,
            "ingest.columns.time" => self.columns.time = Some(raw.trim().to_string()),
            "events.dispersion_k" => a.dispersion_k = parse_f64(key, raw)?,
            "events.min_spike_duration_s" => a.min_spike_duration_s = parse_f64(key, raw)?,
            "events.merge_gap_s" => a.merge_gap_s = parse_f64(key, raw)?,
            "events.burst_gap_s" => a.burst_gap_s = parse_f64(key, raw)?,
            "coupling.separation_metric" => a.separation_metric = raw.parse()?,
            "propagation.window_s" => a.propagation_window_s = parse_f64(key, raw)?,
            "propagation.reference_direction" => {
                a.reference_direction = Direction::from_label(raw)
                    .map_err(|e| Error::Config(format!("{key}: {e}")))?
            }
            "report.isi_short_bin_s" => r.isi_short_bin_s = parse_f64(key, raw)?,
            "report.isi_short_max_s" => r.isi_short_max_s = parse_f64(key, raw)?,
            "report.isi_long_bin_s" => r.isi_long_bin_s = parse_f64(key, raw)?,
            "report.isi_long_max_s" => r.isi_long_max_s = parse_f64(key, raw)?,
            "report.amplitude_bin_mV" => r.amplitude_bin_mv = parse_f64(key, raw)?,
            "report.score_tolerance_s" => r.score_tolerance_s = parse_f64(key, raw)?,
            _ => match key.strip_prefix("ingest.columns.") {
                Some(label) => {
                    let d = Direction::from_label(label)
                        .map_err(|_| Error::Config(format!("unknown config key {key:?}")))?;
                    let name = raw.trim();
                    if name.is_empty() {
                        return Err(Error::Config(format!("{key}: empty column name")));
                    }
                    self.columns.channels[d.index()] = name.to_string();
                    self.sources.insert(format!("ingest.columns.{d}"), source);
                    return Ok(());
                }
                None => return Err(Error::Config(format!("unknown config key {key:?}"))),
            },
        }
        self.sources.insert(key.to_string(), source);
        Ok(())
    }

    /// Applies a `key=value` override.
    pub fn set_assignment(&mut self, assignment: &str, source: ValueSource) -> Result<()> {
        let (key, value) = assignment
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override {assignment:?} is not key=value")))?;
        self.set(key.trim(), value, source)
    }

    /// Layers a sectioned key-value document over the current values.
    pub fn merge_toml(&mut self, text: &str) -> Result<()> {
        let table: toml::Table = text
            .parse()
            .map_err(|e: toml::de::Error| Error::Config(e.message().to_string()))?;
        let mut flat = Vec::new();
        flatten("", &table, &mut flat)?;
        for (key, value) in flat {
            self.set(&key, &value, ValueSource::File)?;
        }
        self.validate()
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let mut cfg = PipelineConfig::default();
        cfg.merge_toml(text)?;
        Ok(cfg)
    }

    pub fn merge_file(&mut self, path: &Path) -> Result<()> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        self.merge_toml(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn validate(&self) -> Result<()> {
        self.analysis.validate()?;
        let r = &self.report;
        for (name, v) in [
            ("report.isi_short_bin_s", r.isi_short_bin_s),
            ("report.isi_short_max_s", r.isi_short_max_s),
            ("report.isi_long_bin_s", r.isi_long_bin_s),
            ("report.isi_long_max_s", r.isi_long_max_s),
            ("report.amplitude_bin_mV", r.amplitude_bin_mv),
            ("report.score_tolerance_s", r.score_tolerance_s),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::Config(format!("{name} must be > 0, got {v}")));
            }
        }
        for (bin, max) in [
            (r.isi_short_bin_s, r.isi_short_max_s),
            (r.isi_long_bin_s, r.isi_long_max_s),
        ] {
            if max / bin > 1e6 {
                return Err(Error::Config("ISI histogram would exceed 1e6 bins".into()));
            }
        }
        Ok(())
    }

    fn value_of(&self, key: &str) -> String {
        let a = &self.analysis;
        let r = &self.report;
        match key {
            "ingest.units" => self.units.to_string(),
            "ingest.detrend_window_s" => a.detrend_window_s.to_string(),
            "ingest.max_gap_interp_samples" => a.max_gap_interp_samples.to_string(),
            "ingest.columns.time" => self
                .columns
                .time
                .clone()
                .unwrap_or_else(|| "<first column>".into()),
            "events.dispersion_k" => a.dispersion_k.to_string(),
            "events.min_spike_duration_s" => a.min_spike_duration_s.to_string(),
            "events.merge_gap_s" => a.merge_gap_s.to_string(),
            "events.burst_gap_s" => a.burst_gap_s.to_string(),
            "coupling.separation_metric" => a.separation_metric.to_string(),
            "propagation.window_s" => a.propagation_window_s.to_string(),
            "propagation.reference_direction" => a.reference_direction.to_string(),
            "report.isi_short_bin_s" => r.isi_short_bin_s.to_string(),
            "report.isi_short_max_s" => r.isi_short_max_s.to_string(),
            "report.isi_long_bin_s" => r.isi_long_bin_s.to_string(),
            "report.isi_long_max_s" => r.isi_long_max_s.to_string(),
            "report.amplitude_bin_mV" => r.amplitude_bin_mv.to_string(),
            "report.score_tolerance_s" => r.score_tolerance_s.to_string(),
            other => {
                let label = other.strip_prefix("ingest.columns.").unwrap_or(other);
                Direction::from_label(label)
                    .map(|d| self.columns.channels[d.index()].clone())
                    .unwrap_or_default()
            }
        }
    }

    /// Every parameter that can influence results, with its value and
    /// where the value came from. Fixed constants are listed as `fixed`.
    pub fn echo(&self) -> Vec<EchoEntry> {
        let mut out: Vec<EchoEntry> = Self::keys()
            .into_iter()
            .map(|key| EchoEntry {
                value: self.value_of(&key),
                source: self
                    .sources
                    .get(&key)
                    .copied()
                    .unwrap_or(ValueSource::Default)
                    .to_string(),
                key,
            })
            .collect();
        for (key, value) in [
            ("coupling.min_overlap_samples", MIN_OVERLAP.to_string()),
            ("events.min_dispersion_samples", MIN_DISPERSION_SAMPLES.to_string()),
            ("events.mad_to_sigma", crate::events::MAD_TO_SIGMA.to_string()),
        ] {
            out.push(EchoEntry {
                key: key.to_string(),
                value,
                source: "fixed".to_string(),
            });
        }
        out
    }
}

fn flatten(prefix: &str, table: &toml::Table, out: &mut Vec<(String, String)>) -> Result<()> {
    for (k, v) in table {
        let key = if prefix.is_empty() {
            k.clone()
        } else {
            format!("{prefix}.{k}")
        };
        match v {
            toml::Value::Table(t) => flatten(&key, t, out)?,
            toml::Value::String(s) => out.push((key, s.clone())),
            toml::Value::Integer(i) => out.push((key, i.to_string())),
            toml::Value::Float(f) => out.push((key, f.to_string())),
            other => {
                return Err(Error::Config(format!(
                    "{key}: unsupported value {other}"
                )))
            }
        }
    }
    Ok(())
}
