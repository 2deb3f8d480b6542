//! Analysis of slow multichannel recordings from an eight-arm star
//! electrode array sampled at around 1 Hz.
//!
//! ```text
//! delimited text ─ ingest::load_recording
//!                   ├─ ingest::repair_gaps      short dropouts bridged
//!                   ├─ ingest::detrend          moving-median baseline removed
//!                   │    ├─ events::detect_spikes      k robust sigmas, min duration
//!                   │    │    ├─ events::direction_stats   rates, amplitudes, ISIs
//!                   │    │    ├─ events::group_bursts      quiescent-gap bursts
//!                   │    │    └─ propagation::match_delays  reference onsets -> first spikes
//!                   │    └─ ingest::normalise
//!                   │         └─ coupling::correlation_matrix -> separation_decay
//!                   └─ pipeline             stages, pooling, reports, tables
//! ```
//!
//! [`synth`] generates recordings with planted ground truth so every stage
//! can be checked against known answers.

pub mod config;
pub mod coupling;
pub mod error;
pub mod events;
pub mod ingest;
pub mod pipeline;
pub mod propagation;
pub mod stats;
pub mod synth;
pub mod types;

pub use config::{PipelineConfig, ReportParams};
pub use error::{Error, ErrorKind, Result};
pub use types::{
    direction_of_label, separation, AnalysisConfig, Burst, ChannelSeries, Direction, Recording,
    SeparationMetric, SpikeEvent, N_DIRECTIONS,
};
