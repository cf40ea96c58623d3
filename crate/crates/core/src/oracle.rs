//! Brute-force reference implementations and randomized cross-checks.
//!
//! The routines here are written as plain loops over `Vec`s and share no
//! code with the library paths they check. [`run_all`] compares the two on
//! random inputs; the `oracle` CLI command prints its outcome.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::acquisition::{bald_reference, bansa, DiscreteDistribution};
use crate::attention::{softmax_rows, AttentionMap};
use crate::diffusion::{forward_noise, tweedie_estimate, LatentState, NoiseSchedule};
use crate::error::Result;
use crate::io::tensor::Tensor;
use crate::layer_probe::{pearson, select_depth, spearman, ScoreTable};
use crate::masking::AttentionEnsemble;
use crate::rng::Stream;

/// Mean over rows of the Shannon entropy (nats) of each row.
pub fn mean_row_entropy(map: &[Vec<f64>]) -> f64 {
    let mut total = 0.0;
    for row in map {
        let mut h = 0.0;
        for &x in row {
            if x > 0.0 {
                h -= x * x.ln();
            }
        }
        total += h;
    }
    total / map.len() as f64
}

/// Entropy of the averaged map minus the average entropy of the samples.
pub fn bansa_naive(samples: &[Vec<Vec<f64>>]) -> f64 {
    let k = samples.len() as f64;
    let rows = samples[0].len();
    let cols = samples[0][0].len();
    let mut mean = vec![vec![0.0; cols]; rows];
    for s in samples {
        for i in 0..rows {
            for j in 0..cols {
                mean[i][j] += s[i][j] / k;
            }
        }
    }
    let avg_h: f64 = samples.iter().map(|s| mean_row_entropy(s)).sum::<f64>() / k;
    mean_row_entropy(&mean) - avg_h
}

/// Mutual information between the class and the sample index.
pub fn bald_naive(dists: &[Vec<f64>]) -> f64 {
    bansa_naive(&dists.iter().map(|d| vec![d.clone()]).collect::<Vec<_>>())
}

pub fn pearson_naive(x: &[f64], y: &[f64]) -> Option<f64> {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for i in 0..x.len() {
        sxy += (x[i] - mx) * (y[i] - my);
        sxx += (x[i] - mx) * (x[i] - mx);
        syy += (y[i] - my) * (y[i] - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return None;
    }
    Some(sxy / (sxx * syy).sqrt())
}

/// Spearman correlation for inputs without ties.
pub fn spearman_naive(x: &[f64], y: &[f64]) -> Option<f64> {
    let rank = |v: &[f64]| {
        v.iter()
            .map(|a| v.iter().filter(|b| *b < a).count() as f64)
            .collect::<Vec<_>>()
    };
    pearson_naive(&rank(x), &rank(y))
}

/// Scans every depth: cumulative means, correlation with the full-depth
/// mean, and the first depth reaching `tau`. Falls back to the last depth.
pub fn scan_depth(rows: &[Vec<f64>], tau: f64) -> usize {
    let layers = rows[0].len();
    let cum = |d: usize| -> Vec<f64> {
        rows.iter()
            .map(|r| r[..=d].iter().sum::<f64>() / (d + 1) as f64)
            .collect()
    };
    let full = cum(layers - 1);
    for d in 0..layers {
        if let Some(r) = pearson_naive(&cum(d), &full) {
            if r >= tau {
                return d;
            }
        }
    }
    layers - 1
}

/// Random row-stochastic map with peakedness drawn per map.
pub fn random_map(rows: usize, cols: usize, rng: &mut impl Rng) -> Vec<Vec<f64>> {
    let temp: f64 = rng.gen_range(0.2..4.0);
    (0..rows)
        .map(|_| {
            let logits: Vec<f64> = (0..cols).map(|_| rng.gen_range(-1.0..1.0) * temp).collect();
            let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
            let s: f64 = e.iter().sum();
            e.iter().map(|x| x / s).collect()
        })
        .collect()
}

pub fn to_map(rows: &[Vec<f64>]) -> Result<AttentionMap> {
    let (r, c) = (rows.len(), rows[0].len());
    AttentionMap::from_shape_vec(r, c, rows.concat())
}

pub fn to_ensemble(samples: &[Vec<Vec<f64>>]) -> Result<AttentionEnsemble> {
    AttentionEnsemble::new(samples.iter().map(|s| to_map(s)).collect::<Result<_>>()?)
}

/// Outcome of one randomized comparison.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    pub cases: usize,
    pub max_error: f64,
    pub tolerance: f64,
    pub passed: bool,
}

impl Check {
    fn new(name: &str, cases: usize, max_error: f64, tolerance: f64) -> Self {
        Self {
            name: name.to_string(),
            cases,
            max_error,
            tolerance,
            passed: max_error <= tolerance,
        }
    }
}

fn check_bansa(stream: Stream, cases: usize) -> Result<Check> {
    let mut rng = stream.rng();
    let mut worst = 0.0f64;
    for _ in 0..cases {
        let n = rng.gen_range(1..=16);
        let k = rng.gen_range(1..=16);
        let samples: Vec<_> = (0..k).map(|_| random_map(n, n, &mut rng)).collect();
        let lib = bansa(&to_ensemble(&samples)?).value;
        worst = worst.max((lib - bansa_naive(&samples)).abs());
    }
    Ok(Check::new("bansa matches nested-loop oracle", cases, worst, 1e-12))
}

fn check_bald(stream: Stream, cases: usize) -> Result<Check> {
    let mut rng = stream.rng();
    let mut worst = 0.0f64;
    for _ in 0..cases {
        let n = rng.gen_range(2..=16);
        let k = rng.gen_range(1..=16);
        let rows: Vec<Vec<f64>> = (0..k).map(|_| random_map(1, n, &mut rng).remove(0)).collect();
        let dists = rows
            .iter()
            .map(|r| DiscreteDistribution::new(r.clone()))
            .collect::<Result<Vec<_>>>()?;
        let lib = bald_reference(&dists)?.value;
        worst = worst.max((lib - bald_naive(&rows)).abs());
    }
    Ok(Check::new("bald_reference matches oracle", cases, worst, 1e-12))
}

fn check_softmax(stream: Stream, cases: usize) -> Result<Check> {
    let mut rng = stream.rng();
    let mut worst = 0.0f64;
    for _ in 0..cases {
        let (r, c) = (rng.gen_range(1..=8), rng.gen_range(1..=8));
        let logits: Vec<f64> = (0..r * c).map(|_| rng.gen_range(-5.0..5.0)).collect();
        let arr = ndarray::Array2::from_shape_vec((r, c), logits.clone()).expect("shape matches length");
        let lib = softmax_rows(arr.view())?;
        for i in 0..r {
            let row = &logits[i * c..(i + 1) * c];
            let s: f64 = row.iter().map(|x| x.exp()).sum();
            for (j, x) in row.iter().enumerate() {
                worst = worst.max((lib.view()[[i, j]] - x.exp() / s).abs());
            }
        }
    }
    Ok(Check::new("softmax_rows matches exp/sum", cases, worst, 1e-12))
}

fn check_correlations(stream: Stream, cases: usize) -> Result<Check> {
    let mut rng = stream.rng();
    let mut worst = 0.0f64;
    for _ in 0..cases {
        let n = rng.gen_range(3..40);
        let x: Vec<f64> = (0..n).map(|_| rng.gen::<f64>()).collect();
        let y: Vec<f64> = x
            .iter()
            .map(|v| v * rng.gen_range(-1.0..1.0) + rng.gen::<f64>())
            .collect();
        if let (Some(p), Some(s)) = (pearson_naive(&x, &y), spearman_naive(&x, &y)) {
            worst = worst.max((pearson(&x, &y)? - p).abs());
            worst = worst.max((spearman(&x, &y)? - s).abs());
        }
    }
    Ok(Check::new("pearson/spearman match oracle", cases, worst, 1e-12))
}

fn check_depth(stream: Stream, cases: usize) -> Result<Check> {
    let mut rng = stream.rng();
    let mut mismatches = 0usize;
    for _ in 0..cases {
        let m = rng.gen_range(3..30);
        let l = rng.gen_range(1..10);
        let rows: Vec<Vec<f64>> = (0..m)
            .map(|_| {
                let base = rng.gen::<f64>();
                (0..l).map(|d| base * d as f64 + rng.gen::<f64>()).collect()
            })
            .collect();
        let tau = rng.gen_range(0.0..1.0);
        let lib = select_depth(&ScoreTable::from_rows(rows.clone())?, tau)?.d_star;
        if lib != scan_depth(&rows, tau) {
            mismatches += 1;
        }
    }
    Ok(Check::new(
        "select_depth matches brute-force scan",
        cases,
        mismatches as f64,
        0.0,
    ))
}

fn check_tweedie(stream: Stream) -> Result<Check> {
    let sched = NoiseSchedule::default();
    let z0 = LatentState::new(crate::diffusion::gaussian_noise(16, 8, stream.tagged("z0")), 0)?;
    let mut worst = 0.0f64;
    for t in 1..=sched.steps() {
        let eps_stream = stream.tagged("eps").split(t as u64);
        let zt = forward_noise(&z0, t, &sched, eps_stream)?;
        let eps = crate::diffusion::gaussian_noise(16, 8, eps_stream);
        let back = tweedie_estimate(&zt, &eps, t, &sched)?;
        worst = worst.max((&back - &z0.data).mapv(f64::abs).fold(0.0, |a: f64, &b| a.max(b)));
    }
    Ok(Check::new(
        "tweedie inverts forward noising",
        sched.steps(),
        worst,
        1e-9,
    ))
}

fn check_tensor(stream: Stream, cases: usize) -> Result<Check> {
    let mut rng = stream.rng();
    let mut failures = 0usize;
    for _ in 0..cases {
        let rank = rng.gen_range(0..4);
        let dims: Vec<u64> = (0..rank).map(|_| rng.gen_range(0..6)).collect();
        let len = dims.iter().product::<u64>() as usize;
        let data: Vec<f64> = (0..len).map(|_| f64::from_bits(rng.gen::<u64>() >> 2)).collect();
        let t = Tensor::new(dims, data)?;
        let back = Tensor::decode(&t.encode())?;
        let same = back.dims == t.dims && back.data.iter().zip(&t.data).all(|(a, b)| a.to_bits() == b.to_bits());
        if !same {
            failures += 1;
        }
    }
    Ok(Check::new(
        "tensor encode/decode is bitwise",
        cases,
        failures as f64,
        0.0,
    ))
}

/// Runs every cross-check with randomness derived from `seed`.
pub fn run_all(seed: u64) -> Result<Vec<Check>> {
    let root = Stream::new(seed).tagged("oracle");
    Ok(vec![
        check_bansa(root.tagged("bansa"), 500)?,
        check_bald(root.tagged("bald"), 500)?,
        check_softmax(root.tagged("softmax"), 200)?,
        check_correlations(root.tagged("corr"), 200)?,
        check_depth(root.tagged("depth"), 200)?,
        check_tweedie(root.tagged("tweedie"))?,
        check_tensor(root.tagged("tensor"), 200)?,
    ])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn all_checks_pass() {
        for c in run_all(7).unwrap() {
            assert!(c.passed, "{c:?}");
        }
    }

    #[test]
    fn naive_bald_known_value() {
        let v = bald_naive(&[vec![0.9, 0.1], vec![0.1, 0.9]]);
        assert!((v - 0.368_064_207_168_497).abs() < 1e-12);
    }

    #[test]
    fn scan_depth_falls_back_to_last() {
        let rows = vec![vec![1.0, 0.0], vec![1.0, 1.0], vec![1.0, 2.0]];
        assert_eq!(scan_depth(&rows, 0.5), 1);
    }
}
