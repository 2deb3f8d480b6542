//! Zero-lag Pearson coupling between channels and its decay with
//! channel separation.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::Normalised;
use crate::stats;
use crate::types::{separation, Direction, SeparationMetric, N_DIRECTIONS};

/// Pairs with fewer jointly valid samples are left undefined.
pub const MIN_OVERLAP: usize = 100;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrelationMatrix {
    /// `None` where a pair is undefined (excluded channel or short overlap).
    pub values: [[Option<f64>; N_DIRECTIONS]; N_DIRECTIONS],
    pub n_overlap: [[usize; N_DIRECTIONS]; N_DIRECTIONS],
    pub excluded: Vec<Direction>,
}

impl CorrelationMatrix {
    pub fn get(&self, a: Direction, b: Direction) -> Option<f64> {
        self.values[a.index()][b.index()]
    }

    /// Upper-triangle pairs `(i, j, r)` with `i < j` that are defined.
    pub fn defined_pairs(&self) -> impl Iterator<Item = (Direction, Direction, f64)> + '_ {
        (0..N_DIRECTIONS).flat_map(move |i| {
            (i + 1..N_DIRECTIONS).filter_map(move |j| {
                self.values[i][j].map(|r| (Direction::ALL[i], Direction::ALL[j], r))
            })
        })
    }
}

/// Pearson coefficient over jointly valid samples, with its sample count.
pub fn pearson(x: &[f64], x_valid: &[bool], y: &[f64], y_valid: &[bool]) -> (Option<f64>, usize) {
    let mut n = 0usize;
    let (mut sx, mut sy) = (0.0, 0.0);
    for i in 0..x.len().min(y.len()) {
        if x_valid[i] && y_valid[i] {
            n += 1;
            sx += x[i];
            sy += y[i];
        }
    }
    if n < 2 {
        return (None, n);
    }
    let (mx, my) = (sx / n as f64, sy / n as f64);
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for i in 0..x.len().min(y.len()) {
        if x_valid[i] && y_valid[i] {
            let (dx, dy) = (x[i] - mx, y[i] - my);
            sxy += dx * dy;
            sxx += dx * dx;
            syy += dy * dy;
        }
    }
    if sxx <= 0.0 || syy <= 0.0 {
        return (None, n);
    }
    (Some((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0)), n)
}

pub fn correlation_matrix(norm: &Normalised) -> Result<CorrelationMatrix> {
    let excluded = norm.excluded();
    if N_DIRECTIONS - excluded.len() < 2 {
        return Err(Error::InsufficientCoverage);
    }
    let pairs: Vec<(usize, usize)> = (0..N_DIRECTIONS)
        .flat_map(|i| (i + 1..N_DIRECTIONS).map(move |j| (i, j)))
        .collect();
    let results: Vec<(usize, usize, Option<f64>, usize)> = pairs
        .par_iter()
        .map(|&(i, j)| {
            let (a, b) = (&norm.channels[i], &norm.channels[j]);
            let (r, n) = pearson(&a.values, &a.valid, &b.values, &b.valid);
            let r = if a.excluded || b.excluded || n < MIN_OVERLAP {
                None
            } else {
                r
            };
            (i, j, r, n)
        })
        .collect();

    let mut values = [[None; N_DIRECTIONS]; N_DIRECTIONS];
    let mut n_overlap = [[0; N_DIRECTIONS]; N_DIRECTIONS];
    for (i, ch) in norm.channels.iter().enumerate() {
        n_overlap[i][i] = ch.valid.iter().filter(|&&v| v).count();
        if !ch.excluded {
            values[i][i] = Some(1.0);
        }
    }
    let mut any_defined = false;
    for (i, j, r, n) in results {
        values[i][j] = r;
        values[j][i] = r;
        n_overlap[i][j] = n;
        n_overlap[j][i] = n;
        any_defined |= r.is_some();
    }
    if !any_defined {
        return Err(Error::InsufficientCoverage);
    }
    Ok(CorrelationMatrix {
        values,
        n_overlap,
        excluded,
    })
}

/// Summary of the coefficients at one separation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecayPoint {
    pub separation: usize,
    pub mean_r: Option<f64>,
    pub sd_r: Option<f64>,
    pub n_pairs: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeparationDecay {
    pub metric: SeparationMetric,
    pub points: Vec<DecayPoint>,
}

impl SeparationDecay {
    pub fn at(&self, s: usize) -> Option<&DecayPoint> {
        self.points.iter().find(|p| p.separation == s)
    }
}

pub fn separation_decay(m: &CorrelationMatrix, metric: SeparationMetric) -> SeparationDecay {
    let points = (1..=metric.max_separation())
        .map(|s| {
            let rs: Vec<f64> = m
                .defined_pairs()
                .filter(|&(a, b, _)| separation(a, b, metric) == s)
                .map(|(_, _, r)| r)
                .collect();
            DecayPoint {
                separation: s,
                mean_r: stats::mean(&rs),
                sd_r: stats::std_dev(&rs),
                n_pairs: rs.len(),
            }
        })
        .collect();
    SeparationDecay { metric, points }
}

/// Element-wise mean of several session matrices; overlaps add up.
pub fn pool_matrices(matrices: &[&CorrelationMatrix]) -> Option<CorrelationMatrix> {
    if matrices.is_empty() {
        return None;
    }
    let mut values = [[None; N_DIRECTIONS]; N_DIRECTIONS];
    let mut n_overlap = [[0; N_DIRECTIONS]; N_DIRECTIONS];
    for i in 0..N_DIRECTIONS {
        for j in 0..N_DIRECTIONS {
            let rs: Vec<f64> = matrices.iter().filter_map(|m| m.values[i][j]).collect();
            values[i][j] = if i == j && !rs.is_empty() {
                Some(1.0)
            } else {
                stats::mean(&rs)
            };
            n_overlap[i][j] = matrices.iter().map(|m| m.n_overlap[i][j]).sum();
        }
    }
    let excluded = Direction::ALL
        .iter()
        .copied()
        .filter(|d| values[d.index()][d.index()].is_none())
        .collect();
    Some(CorrelationMatrix {
        values,
        n_overlap,
        excluded,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ingest::NormalisedChannel;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn noise(n: usize, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| StandardNormal.sample(&mut rng)).collect()
    }

    fn normalised(series: Vec<Vec<f64>>) -> Normalised {
        Normalised {
            channels: series
                .into_iter()
                .enumerate()
                .map(|(i, v)| {
                    let valid = vec![true; v.len()];
                    match crate::ingest::standardise(&v, &valid) {
                        Some(z) => NormalisedChannel {
                            direction: Direction::ALL[i],
                            values: z,
                            valid,
                            excluded: false,
                        },
                        None => NormalisedChannel {
                            direction: Direction::ALL[i],
                            values: v,
                            valid,
                            excluded: true,
                        },
                    }
                })
                .collect(),
        }
    }

    /// Textbook Pearson on two full series.
    fn direct_pearson(x: &[f64], y: &[f64]) -> f64 {
        let n = x.len() as f64;
        let (sx, sy): (f64, f64) = (x.iter().sum(), y.iter().sum());
        let sxy: f64 = x.iter().zip(y).map(|(a, b)| a * b).sum();
        let sxx: f64 = x.iter().map(|a| a * a).sum();
        let syy: f64 = y.iter().map(|b| b * b).sum();
        (n * sxy - sx * sy) / ((n * sxx - sx * sx).sqrt() * (n * syy - sy * sy).sqrt())
    }

    #[test]
    fn self_and_anti_correlation() {
        let x = noise(500, 1);
        let neg: Vec<f64> = x.iter().map(|v| -v).collect();
        let mut series = vec![x.clone(), neg];
        series.extend((2..8).map(|c| noise(500, c)));
        let m = correlation_matrix(&normalised(series)).unwrap();
        assert_eq!(m.get(Direction::N, Direction::N), Some(1.0));
        assert!((m.get(Direction::N, Direction::NE).unwrap() + 1.0).abs() < 1e-12);
    }

    #[test]
    fn independent_noise_is_uncorrelated() {
        let n = 100_000;
        let series: Vec<Vec<f64>> = (0..8).map(|c| noise(n, 40 + c)).collect();
        let r_direct = direct_pearson(&series[0], &series[1]);
        let m = correlation_matrix(&normalised(series)).unwrap();
        let r = m.get(Direction::N, Direction::NE).unwrap();
        assert!((r - r_direct).abs() < 1e-9);
        assert!(r.abs() < 0.02);
    }

    #[test]
    fn excluded_and_short_pairs_are_undefined() {
        let mut series: Vec<Vec<f64>> = (0..8).map(|c| noise(300, c)).collect();
        series[4] = vec![1.0; 300];
        let mut norm = normalised(series);
        for v in norm.channels[6].valid.iter_mut().skip(50) {
            *v = false;
        }
        let m = correlation_matrix(&norm).unwrap();
        assert_eq!(m.excluded, vec![Direction::S]);
        assert_eq!(m.get(Direction::S, Direction::N), None);
        assert_eq!(m.get(Direction::S, Direction::S), None);
        assert_eq!(m.get(Direction::W, Direction::N), None);
        assert_eq!(m.n_overlap[6][0], 50);
    }

    #[test]
    fn no_coverage_is_an_error() {
        let mut norm = normalised((0..8).map(|c| noise(300, c)).collect());
        for (i, ch) in norm.channels.iter_mut().enumerate() {
            for (k, v) in ch.valid.iter_mut().enumerate() {
                *v = k / 30 == i;
            }
        }
        assert!(matches!(correlation_matrix(&norm), Err(Error::InsufficientCoverage)));
    }

    fn constant_matrix(r: f64) -> CorrelationMatrix {
        let mut values = [[Some(r); N_DIRECTIONS]; N_DIRECTIONS];
        for (i, row) in values.iter_mut().enumerate() {
            row[i] = Some(1.0);
        }
        CorrelationMatrix {
            values,
            n_overlap: [[1000; N_DIRECTIONS]; N_DIRECTIONS],
            excluded: vec![],
        }
    }

    #[test]
    fn decay_of_constant_matrix() {
        let d = separation_decay(&constant_matrix(0.5), SeparationMetric::Linear);
        for p in &d.points {
            assert_eq!(p.mean_r, Some(0.5));
            assert_eq!(p.sd_r, Some(0.0));
        }
        let counts: Vec<usize> = d.points.iter().map(|p| p.n_pairs).collect();
        assert_eq!(counts, vec![7, 6, 5, 4, 3, 2, 1]);
        let circ = separation_decay(&constant_matrix(0.5), SeparationMetric::Circular);
        let counts: Vec<usize> = circ.points.iter().map(|p| p.n_pairs).collect();
        assert_eq!(counts, vec![8, 8, 8, 4]);
    }

    proptest! {
        #[test]
        fn affine_invariance(seed in 0u64..500, scales in prop::collection::vec((0.01f64..100.0, -50.0f64..50.0), 8)) {
            let n = 400;
            let shared = noise(n, seed);
            let raw: Vec<Vec<f64>> = (0..8)
                .map(|c| noise(n, seed * 10 + c as u64 + 1).iter().zip(&shared).map(|(a, s)| a + 0.5 * s).collect())
                .collect();
            let moved: Vec<Vec<f64>> = raw
                .iter()
                .zip(&scales)
                .map(|(x, &(a, b))| x.iter().map(|v| a * v + b).collect())
                .collect();
            let m1 = correlation_matrix(&normalised(raw)).unwrap();
            let m2 = correlation_matrix(&normalised(moved)).unwrap();
            for i in 0..8 {
                for j in 0..8 {
                    prop_assert!((m1.values[i][j].unwrap() - m2.values[i][j].unwrap()).abs() < 1e-9);
                    prop_assert_eq!(m1.values[i][j], m1.values[j][i]);
                    prop_assert!(m1.values[i][j].unwrap().abs() <= 1.0 + 1e-12);
                }
                prop_assert_eq!(m1.values[i][i], Some(1.0));
            }
        }
    }
}
