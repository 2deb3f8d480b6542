//! Loading delimited text exports and preparing signals for analysis.
//!
//! Input files have one header row, one time column and eight channel
//! columns. The delimiter is a comma or a tab, picked from the header row.
//! Empty cells are missing samples. The time column holds either elapsed
//! seconds or absolute timestamps; both become a uniform sample grid whose
//! step is the median time step of the file.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use chrono::NaiveDateTime;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::stats;
use crate::types::{ChannelSeries, Direction, Recording, N_DIRECTIONS};

/// Unit of the voltage columns in a source file.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum VoltageUnit {
    #[default]
    #[serde(rename = "mV")]
    Millivolt,
    #[serde(rename = "V")]
    Volt,
}

impl VoltageUnit {
    fn to_millivolts(self) -> f64 {
        match self {
            VoltageUnit::Millivolt => 1.0,
            VoltageUnit::Volt => 1000.0,
        }
    }
}

impl FromStr for VoltageUnit {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "mV" | "mv" => Ok(VoltageUnit::Millivolt),
            "V" | "v" => Ok(VoltageUnit::Volt),
            other => Err(Error::Config(format!(
                "unknown voltage unit {other:?} (expected mV or V)"
            ))),
        }
    }
}

impl fmt::Display for VoltageUnit {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            VoltageUnit::Millivolt => "mV",
            VoltageUnit::Volt => "V",
        })
    }
}

/// Maps file column names onto the time axis and the eight compass channels.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ColumnMap {
    /// Name of the time column; `None` takes the first column.
    pub time: Option<String>,
    /// Column name for each direction, in compass order.
    pub channels: [String; N_DIRECTIONS],
}

impl Default for ColumnMap {
    fn default() -> Self {
        ColumnMap {
            time: None,
            channels: Direction::ALL.map(|d| d.label().to_string()),
        }
    }
}

impl ColumnMap {
    /// Parses `key=column` pairs separated by commas, where `key` is `time`
    /// or a compass label. Unlisted directions keep their label as column name.
    pub fn parse(text: &str) -> Result<ColumnMap> {
        let mut map = ColumnMap::default();
        for item in text.split(',').map(str::trim).filter(|s| !s.is_empty()) {
            let (key, column) = item.split_once('=').ok_or_else(|| {
                Error::Config(format!("column mapping entry {item:?} is not key=column"))
            })?;
            let column = column.trim();
            if column.is_empty() {
                return Err(Error::Config(format!(
                    "column mapping entry {item:?} has an empty column name"
                )));
            }
            let key = key.trim();
            if key.eq_ignore_ascii_case("time") || key.eq_ignore_ascii_case("t") {
                map.time = Some(column.to_string());
            } else {
                let d = Direction::from_label(key)
                    .map_err(|_| Error::Config(format!("unknown column mapping key {key:?}")))?;
                map.channels[d.index()] = column.to_string();
            }
        }
        Ok(map)
    }
}

/// Hard cap on the sample grid relative to the number of rows, so a single
/// absurd time jump cannot allocate unbounded memory.
const MAX_GRID_PER_ROW: usize = 16;
const MAX_GRID_SLACK: usize = 100_000;

enum TimeMode {
    Elapsed,
    Absolute,
}

const TIMESTAMP_FORMATS: &[&str] = &[
    "%Y-%m-%d %H:%M:%S%.f",
    "%Y-%m-%dT%H:%M:%S%.f",
    "%Y/%m/%d %H:%M:%S%.f",
    "%d/%m/%Y %H:%M:%S%.f",
];

fn parse_timestamp(cell: &str) -> Option<f64> {
    TIMESTAMP_FORMATS.iter().find_map(|fmt| {
        NaiveDateTime::parse_from_str(cell, fmt)
            .ok()
            .map(|dt| dt.and_utc().timestamp_micros() as f64 / 1e6)
    })
}

fn parse_number(cell: &str) -> Option<f64> {
    // decimal point only: reject locale commas and anything exotic
    let v: f64 = cell.parse().ok()?;
    v.is_finite().then_some(v)
}

/// Parses a delimited text export already held in memory.
pub fn parse_recording(
    text: &str,
    session_id: &str,
    columns: &ColumnMap,
    unit: VoltageUnit,
) -> Result<Recording> {
    let text = text.strip_prefix('\u{feff}').unwrap_or(text);
    let header_line = text.lines().next().ok_or_else(|| Error::Parse {
        line: 1,
        message: "empty input, header row expected".into(),
    })?;
    let delimiter = if header_line.contains('\t') { b'\t' } else { b',' };

    let mut reader = csv::ReaderBuilder::new()
        .delimiter(delimiter)
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());

    let headers = reader
        .headers()
        .map_err(|e| Error::Parse {
            line: 1,
            message: e.to_string(),
        })?
        .clone();
    let find = |name: &str| -> Result<usize> {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::MissingColumn {
                column: name.to_string(),
            })
    };
    let time_idx = match &columns.time {
        Some(name) => find(name)?,
        None if headers.is_empty() => {
            return Err(Error::MissingColumn {
                column: "time".into(),
            })
        }
        None => 0,
    };
    let channel_idx: Vec<usize> = columns
        .channels
        .iter()
        .map(|name| find(name))
        .collect::<Result<_>>()?;

    let scale = unit.to_millivolts();
    let mut times = Vec::new();
    let mut rows: Vec<[Option<f64>; N_DIRECTIONS]> = Vec::new();
    let mut mode = None;
    for (i, record) in reader.records().enumerate() {
        let row_no = i + 1;
        let line = row_no + 1;
        let record = record.map_err(|e| Error::Parse {
            line,
            message: e.to_string(),
        })?;
        if record.iter().all(str::is_empty) {
            continue;
        }
        let time_cell = record.get(time_idx).unwrap_or("");
        let mode = mode.get_or_insert_with(|| {
            if parse_number(time_cell).is_some() {
                TimeMode::Elapsed
            } else {
                TimeMode::Absolute
            }
        });
        let t = match mode {
            TimeMode::Elapsed => parse_number(time_cell),
            TimeMode::Absolute => parse_timestamp(time_cell),
        }
        .ok_or_else(|| Error::Parse {
            line,
            message: format!("bad time value {time_cell:?}"),
        })?;
        if let Some(&prev) = times.last() {
            if t <= prev {
                return Err(Error::NonMonotonicTime { row: row_no });
            }
        }
        times.push(t);

        let mut values = [None; N_DIRECTIONS];
        for (slot, &idx) in values.iter_mut().zip(&channel_idx) {
            let cell = record.get(idx).unwrap_or("");
            if cell.is_empty() {
                continue;
            }
            let v = parse_number(cell).ok_or_else(|| Error::Parse {
                line,
                message: format!("bad sample value {cell:?} in column {:?}", &headers[idx]),
            })?;
            *slot = Some(v * scale);
        }
        rows.push(values);
    }

    if times.len() < 2 {
        return Err(Error::InsufficientSamples {
            channel: "time".into(),
            found: times.len(),
            required: 2,
        });
    }
    let steps: Vec<f64> = times.windows(2).map(|w| w[1] - w[0]).collect();
    let step = stats::median(&steps).expect("at least one step");
    let sample_rate = 1.0 / step;
    if !sample_rate.is_finite() {
        return Err(Error::Malformed {
            what: "time column".into(),
            message: format!("median time step {step} gives no usable sample rate"),
        });
    }

    let t_first = times[0];
    let max_len = times.len() * MAX_GRID_PER_ROW + MAX_GRID_SLACK;
    let mut slots = Vec::with_capacity(times.len());
    for (i, &t) in times.iter().enumerate() {
        let pos = ((t - t_first) / step).round();
        if !(pos.is_finite() && pos < max_len as f64) {
            return Err(Error::Malformed {
                what: "time column".into(),
                message: format!("time gap at data row {} is too large to place on the sample grid", i + 1),
            });
        }
        let pos = pos as usize;
        if let Some(&prev) = slots.last() {
            if pos <= prev {
                return Err(Error::IrregularSampling { row: i + 1 });
            }
        }
        slots.push(pos);
    }
    let len = slots.last().copied().unwrap_or(0) + 1;

    let channels = Direction::ALL
        .iter()
        .map(|&d| {
            let mut samples = vec![0.0; len];
            let mut mask = vec![false; len];
            for (row, &pos) in rows.iter().zip(&slots) {
                if let Some(v) = row[d.index()] {
                    samples[pos] = v;
                    mask[pos] = true;
                }
            }
            ChannelSeries {
                direction: d,
                samples,
                validity_mask: mask,
            }
        })
        .collect::<Vec<_>>();
    for ch in &channels {
        let found = ch.valid_count();
        if found < 2 {
            return Err(Error::InsufficientSamples {
                channel: ch.direction.label().to_string(),
                found,
                required: 2,
            });
        }
    }
    Recording::new(session_id, sample_rate, t_first, channels)
}

/// Reads and parses a recording from disk. The session id defaults to the
/// file stem.
pub fn load_recording(path: &Path, columns: &ColumnMap, unit: VoltageUnit) -> Result<Recording> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let session = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "session".into());
    parse_recording(&text, &session, columns, unit)
}

/// Writes a recording in the same delimited format `parse_recording` reads,
/// with elapsed-seconds time and the default column names. Samples are
/// printed with six decimals.
pub fn write_recording_csv(rec: &Recording, out: &mut impl std::io::Write) -> std::io::Result<()> {
    let mut line = String::with_capacity(128);
    line.push('t');
    for d in Direction::ALL {
        line.push(',');
        line.push_str(d.label());
    }
    line.push('\n');
    out.write_all(line.as_bytes())?;
    let step = 1.0 / rec.sample_rate;
    for i in 0..rec.len() {
        line.clear();
        let t = rec.t0 + i as f64 * step;
        line.push_str(&format!("{t}"));
        for ch in &rec.channels {
            line.push(',');
            if ch.validity_mask[i] {
                line.push_str(&format!("{:.6}", ch.samples[i]));
            }
        }
        line.push('\n');
        out.write_all(line.as_bytes())?;
    }
    Ok(())
}

/// Bridges runs of at most `max_gap_interp_samples` invalid samples by
/// linear interpolation between the valid neighbours. Runs touching either
/// end of the recording have only one neighbour and are left invalid.
pub fn repair_gaps(rec: &Recording, max_gap_interp_samples: usize) -> Recording {
    let mut out = rec.clone();
    for ch in &mut out.channels {
        let n = ch.len();
        let mut i = 0;
        while i < n {
            if ch.validity_mask[i] {
                i += 1;
                continue;
            }
            let start = i;
            while i < n && !ch.validity_mask[i] {
                i += 1;
            }
            let run = i - start;
            if start == 0 || i == n || run > max_gap_interp_samples {
                continue;
            }
            let left = ch.samples[start - 1];
            let right = ch.samples[i];
            let span = (run + 1) as f64;
            for (k, j) in (start..i).enumerate() {
                let frac = (k + 1) as f64 / span;
                ch.samples[j] = left + (right - left) * frac;
                ch.validity_mask[j] = true;
            }
        }
    }
    out
}

/// A recording with its slow baseline removed.
#[derive(Debug, Clone)]
pub struct DetrendedRecording {
    pub base: Recording,
    /// Per channel `raw - baseline`, in millivolts.
    pub detrended: Vec<Vec<f64>>,
    /// Per channel validity of each residual.
    pub valid: Vec<Vec<bool>>,
    pub window_s: f64,
}

impl DetrendedRecording {
    pub fn channel(&self, d: Direction) -> (&[f64], &[bool]) {
        (&self.detrended[d.index()], &self.valid[d.index()])
    }

    /// Builds a detrended recording from residuals that are already
    /// baseline-free, e.g. for detector tests.
    pub fn from_residuals(base: Recording, detrended: Vec<Vec<f64>>, window_s: f64) -> Self {
        let valid = base
            .channels
            .iter()
            .map(|c| c.validity_mask.clone())
            .collect();
        DetrendedRecording {
            base,
            detrended,
            valid,
            window_s,
        }
    }
}

/// Fenwick tree over sample ranks; answers k-th smallest queries for the
/// values currently inside a sliding window.
struct RankTree {
    tree: Vec<u32>,
    top_bit: usize,
}

impl RankTree {
    fn new(size: usize) -> Self {
        let top_bit = if size == 0 {
            0
        } else {
            1 << (usize::BITS - 1 - size.leading_zeros())
        };
        RankTree {
            tree: vec![0; size + 1],
            top_bit,
        }
    }

    fn add(&mut self, rank: usize, insert: bool) {
        let mut i = rank + 1;
        while i < self.tree.len() {
            if insert {
                self.tree[i] += 1;
            } else {
                self.tree[i] -= 1;
            }
            i += i & i.wrapping_neg();
        }
    }

    /// Rank of the k-th smallest element present (k is 1-based).
    fn kth(&self, mut k: u32) -> usize {
        let mut pos = 0;
        let mut bit = self.top_bit;
        while bit > 0 {
            let next = pos + bit;
            if next < self.tree.len() && self.tree[next] < k {
                pos = next;
                k -= self.tree[next];
            }
            bit >>= 1;
        }
        pos
    }
}

/// Centered moving median over `2 * half + 1` samples. The window shrinks
/// symmetrically near either end and ignores invalid samples. Returns `None`
/// where the window holds no valid sample.
pub fn moving_median(values: &[f64], valid: &[bool], half: usize) -> Vec<Option<f64>> {
    let n = values.len();
    let mut order: Vec<usize> = (0..n).filter(|&i| valid[i]).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]).then(a.cmp(&b)));
    let mut rank = vec![usize::MAX; n];
    for (r, &i) in order.iter().enumerate() {
        rank[i] = r;
    }
    let sorted: Vec<f64> = order.iter().map(|&i| values[i]).collect();

    let mut tree = RankTree::new(sorted.len());
    let mut count: u32 = 0;
    let mut lo = 0usize;
    let mut hi = 0usize; // exclusive
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let h = half.min(i).min(n - 1 - i);
        let (new_lo, new_hi) = (i - h, i + h + 1);
        while hi < new_hi {
            if valid[hi] {
                tree.add(rank[hi], true);
                count += 1;
            }
            hi += 1;
        }
        while lo < new_lo {
            if valid[lo] {
                tree.add(rank[lo], false);
                count -= 1;
            }
            lo += 1;
        }
        out.push(match count {
            0 => None,
            c if c % 2 == 1 => Some(sorted[tree.kth(c / 2 + 1)]),
            c => Some(0.5 * (sorted[tree.kth(c / 2)] + sorted[tree.kth(c / 2 + 1)])),
        });
    }
    out
}

/// Half-width in samples of the baseline window.
pub fn detrend_half_window(window_s: f64, sample_rate: f64) -> usize {
    ((window_s * sample_rate).round() as usize) / 2
}

/// Removes slow drift: baseline is a centered moving median over `window_s`.
pub fn detrend(rec: &Recording, window_s: f64) -> Result<DetrendedRecording> {
    if !(window_s.is_finite() && window_s * rec.sample_rate >= 3.0 - 1e-9) {
        return Err(Error::InvalidParameter(format!(
            "detrend window {window_s} s is shorter than 3 samples at {} Hz",
            rec.sample_rate
        )));
    }
    let half = detrend_half_window(window_s, rec.sample_rate).max(1);
    let (detrended, valid): (Vec<_>, Vec<_>) = rec
        .channels
        .par_iter()
        .map(|ch| {
            let baseline = moving_median(&ch.samples, &ch.validity_mask, half);
            let mut residual = vec![0.0; ch.len()];
            let mut ok = vec![false; ch.len()];
            for i in 0..ch.len() {
                if let (true, Some(b)) = (ch.validity_mask[i], baseline[i]) {
                    residual[i] = ch.samples[i] - b;
                    ok[i] = true;
                }
            }
            (residual, ok)
        })
        .unzip();
    Ok(DetrendedRecording {
        base: rec.clone(),
        detrended,
        valid,
        window_s,
    })
}

/// One channel scaled to zero mean and unit (population) variance.
#[derive(Debug, Clone, PartialEq)]
pub struct NormalisedChannel {
    pub direction: Direction,
    pub values: Vec<f64>,
    pub valid: Vec<bool>,
    /// Set when the channel had zero variance or fewer than two valid samples.
    pub excluded: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Normalised {
    pub channels: Vec<NormalisedChannel>,
}

impl Normalised {
    pub fn excluded(&self) -> Vec<Direction> {
        self.channels
            .iter()
            .filter(|c| c.excluded)
            .map(|c| c.direction)
            .collect()
    }
}

/// Standardises one series over its valid samples. `None` for a flat or
/// near-empty series.
pub fn standardise(values: &[f64], valid: &[bool]) -> Option<Vec<f64>> {
    let picked: Vec<f64> = values
        .iter()
        .zip(valid)
        .filter(|(_, &ok)| ok)
        .map(|(&v, _)| v)
        .collect();
    if picked.len() < 2 {
        return None;
    }
    let m = stats::mean(&picked)?;
    let sd = stats::std_dev(&picked)?;
    if !(sd > 0.0) || sd <= m.abs() * 1e-13 {
        return None;
    }
    Some(
        values
            .iter()
            .zip(valid)
            .map(|(&v, &ok)| if ok { (v - m) / sd } else { 0.0 })
            .collect(),
    )
}

pub fn normalise(det: &DetrendedRecording) -> Normalised {
    let channels = Direction::ALL
        .iter()
        .map(|&d| {
            let (values, valid) = det.channel(d);
            match standardise(values, valid) {
                Some(z) => NormalisedChannel {
                    direction: d,
                    values: z,
                    valid: valid.to_vec(),
                    excluded: false,
                },
                None => NormalisedChannel {
                    direction: d,
                    values: vec![0.0; values.len()],
                    valid: valid.to_vec(),
                    excluded: true,
                },
            }
        })
        .collect();
    Normalised { channels }
}
