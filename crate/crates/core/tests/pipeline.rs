use starspike::config::ValueSource;
use starspike::coupling::separation_decay;
use starspike::events::direction_stats;
use starspike::pipeline::{
    pooled_direction_stats, report, run_recordings, CONVENTIONS,
};
use starspike::stats;
use starspike::synth::{generate, SynthParams};
use starspike::{Direction, PipelineConfig, Recording, SeparationMetric};

fn paper(seed: u64, duration_s: f64) -> Recording {
    let mut p = SynthParams::paper_regime(seed);
    p.duration_s = duration_s;
    p.session_id = format!("session-{seed}");
    generate(&p).unwrap().0
}

#[test]
fn pooled_stats_equal_brute_force_over_three_sessions() {
    let recs: Vec<Recording> = (1..=3).map(|s| paper(s, 86_400.0)).collect();
    let bundle = run_recordings(&recs, &PipelineConfig::default(), &[]).unwrap();
    assert_eq!(bundle.pooled.session_ids, vec!["session-1", "session-2", "session-3"]);
    for d in Direction::ALL {
        let trains: Vec<_> = bundle
            .sessions
            .iter()
            .flat_map(|s| s.trains().iter().filter(|t| t.direction == d))
            .collect();
        let mut amps: Vec<f64> = Vec::new();
        let mut isis: Vec<f64> = Vec::new();
        let mut count = 0;
        let mut observed = 0.0;
        for t in &trains {
            count += t.spikes.len();
            observed += t.observed_duration_s;
            amps.extend(t.spikes.iter().map(|s| s.amplitude_mv));
            isis.extend(t.spikes.windows(2).map(|w| w[1].onset_s - w[0].onset_s));
        }
        let pooled = &bundle.pooled.stats[d.index()];
        assert_eq!(pooled.direction, d);
        assert_eq!(pooled.spike_count, count);
        assert_eq!(pooled.rate_per_min, count as f64 / (observed / 60.0));
        assert_eq!(pooled.amplitude_quartiles_mv, stats::quartiles(&amps));
        assert_eq!(pooled.isi_list_s, isis);
        assert_eq!(pooled_direction_stats(&trains).as_ref(), Some(pooled));
    }
    let n_pooled_refs: usize = bundle.sessions.iter().map(|s| s.delays.events.len()).sum();
    for d in &bundle.pooled.propagation.directions {
        assert_eq!(d.n_reference, n_pooled_refs);
        let delays: Vec<f64> = bundle
            .sessions
            .iter()
            .flat_map(|s| s.delays.events.iter())
            .filter_map(|e| e.outcome(d.direction).and_then(|o| o.delay()))
            .collect();
        assert_eq!(d.median_delay_s, stats::median(&delays));
    }
    let spread = &bundle.pooled.rate_spread;
    for r in spread {
        let rates: Vec<f64> = bundle
            .sessions
            .iter()
            .map(|s| s.analyzed.stats[r.direction.index()].rate_per_min)
            .collect();
        assert_eq!(Some(r.session_mean_per_min), stats::mean(&rates));
    }
}

#[test]
fn paper_regime_report_has_every_section() {
    let bundle = run_recordings(&[paper(9, 172_800.0)], &PipelineConfig::default(), &[]).unwrap();
    let s = &bundle.sessions[0];
    assert!(s.trains().iter().all(|t| !t.spikes.is_empty()));
    assert!(!s.analyzed.bursts.is_empty());
    assert!(s.analyzed.isi_short.counts.iter().sum::<usize>() > 0);
    assert!(s.analyzed.isi_long.counts.iter().sum::<usize>() > 0);
    assert!(!s.analyzed.amplitude_histogram.counts.is_empty());
    assert!(!s.delays.events.is_empty());
    assert_eq!(s.delay_polar.len(), 8);
    assert_eq!(s.analyzed.rate_polar.len(), 8);
    assert_eq!(s.analyzed.decay.points.len(), 7);
    assert!(s.propagation.directions.iter().any(|d| d.n_events > 0));
    assert_eq!(bundle.metadata.conventions.len(), CONVENTIONS.len());
}

#[test]
fn noise_only_report_is_empty_but_valid() {
    let (rec, _) = generate(&SynthParams::noise_only(86_400.0, 1.0, 3)).unwrap();
    let bundle = run_recordings(&[rec], &PipelineConfig::default(), &[]).unwrap();
    let s = &bundle.sessions[0];
    assert!(s.trains().iter().all(|t| t.spikes.is_empty()));
    assert!(s.analyzed.bursts.is_empty());
    assert!(s.delays.events.is_empty());
    assert!(s.propagation.directions.iter().all(|d| d.match_rate.is_none() && d.median_delay_s.is_none()));
    assert!(s.delay_polar.iter().all(|p| p.value.is_none()));
    let m = &s.analyzed.detected.correlation;
    for (a, b, r) in m.defined_pairs() {
        let n = m.n_overlap[a.index()][b.index()] as f64;
        assert!(r.abs() < 3.0 / n.sqrt(), "{a}-{b}: {r}");
    }
}

#[test]
fn decay_follows_planted_exponential() {
    // every pair at separation s shares a noise source of variance 0.6 exp(-s)
    let (rec, _) = generate(&SynthParams::exponential_coupling(200_000.0, 4)).unwrap();
    let mut cfg = PipelineConfig::default();
    cfg.set("coupling.separation_metric", "circular", ValueSource::Flag)
        .unwrap();
    let bundle = run_recordings(&[rec], &cfg, &[]).unwrap();
    let decay = &bundle.sessions[0].analyzed.decay;
    assert_eq!(decay.metric, SeparationMetric::Circular);
    // oracle: with unit noise and weight w_s per separation, each channel has
    // variance 1 + sum over shared terms; r(s) is the shared part over it
    for p in &decay.points {
        let expected = oracle_r(p.separation);
        let got = p.mean_r.unwrap();
        assert!((got - expected).abs() < 0.02, "s={}: {got} vs {expected}", p.separation);
    }
    let linear = separation_decay(&bundle.sessions[0].analyzed.detected.correlation, SeparationMetric::Linear);
    assert_eq!(linear.points.len(), 7);
}

fn oracle_r(s: usize) -> f64 {
    let w: Vec<f64> = (1..=4).map(|k| 0.6 * (-(k as f64)).exp()).collect();
    let dirs = Direction::ALL;
    let sep = |a: usize, b: usize| starspike::separation(dirs[a], dirs[b], SeparationMetric::Circular);
    // each unordered pair (a, b) at separation k carries a shared source of
    // variance w[k-1] that feeds both channels
    let var = |c: usize| {
        1.0 + (0..8)
            .filter(|&o| o != c)
            .map(|o| w[sep(c, o) - 1])
            .sum::<f64>()
    };
    let (a, b) = (0usize, s);
    let shared = w[s - 1];
    shared / (var(a) * var(b)).sqrt()
}

#[test]
fn direction_stats_per_session_match_direct_computation() {
    let bundle = run_recordings(&[paper(12, 86_400.0)], &PipelineConfig::default(), &[]).unwrap();
    let s = &bundle.sessions[0];
    for (t, st) in s.trains().iter().zip(&s.analyzed.stats) {
        assert_eq!(&direction_stats(t), st);
    }
}

#[test]
fn config_echo_lists_every_default_and_source() {
    let mut cfg = PipelineConfig::from_toml("[events]\nburst_gap_s = 900\n").unwrap();
    cfg.set("propagation.reference_direction", "W", ValueSource::Flag)
        .unwrap();
    let bundle = run_recordings(&[paper(13, 20_000.0)], &cfg, &[]).unwrap();
    let echo = &bundle.metadata.config;
    let find = |k: &str| echo.iter().find(|e| e.key == k).unwrap();
    assert_eq!(find("events.burst_gap_s").source, "file");
    assert_eq!(find("events.burst_gap_s").value, "900");
    assert_eq!(find("propagation.reference_direction").source, "flag");
    assert_eq!(find("ingest.detrend_window_s").source, "default");
    for key in PipelineConfig::keys() {
        assert!(echo.iter().any(|e| e.key == key), "{key} missing from echo");
    }
    assert_eq!(bundle.sessions[0].delays.reference, Direction::W);
}

#[test]
fn report_rejects_mixed_settings() {
    let rec = paper(14, 20_000.0);
    let cfg = PipelineConfig::default();
    let a = starspike::pipeline::detect_recordings(std::slice::from_ref(&rec), &cfg).unwrap();
    let a = starspike::pipeline::propagate(&starspike::pipeline::analyze(&a, &cfg).unwrap(), &cfg).unwrap();
    let mut other = cfg.clone();
    other.set("events.burst_gap_s", "1200", ValueSource::Flag).unwrap();
    let mut rec2 = rec;
    rec2.session_id = "other".into();
    let b = starspike::pipeline::detect_recordings(&[rec2], &other).unwrap();
    let b = starspike::pipeline::propagate(&starspike::pipeline::analyze(&b, &other).unwrap(), &other).unwrap();
    let err = report(&[a, b], &cfg, &[]).unwrap_err();
    assert_eq!(err.kind(), starspike::ErrorKind::Config);
}
