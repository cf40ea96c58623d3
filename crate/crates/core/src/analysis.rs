//! Diagnostics for attention maps and denoising trajectories.

use ndarray::{Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::attention::AttentionMap;
use crate::diffusion::{LatentState, Rollout};
use crate::error::{Error, Result};

pub const DEFAULT_CUTOFF: f64 = 0.25;

/// Latent states ordered by decreasing `t`.
#[derive(Clone, Debug, PartialEq)]
pub struct TrajectoryRecord {
    pub seed_id: u64,
    pub states: Vec<Array2<f64>>,
}

impl TrajectoryRecord {
    pub fn new(seed_id: u64, states: Vec<Array2<f64>>) -> Result<Self> {
        if states.len() < 2 {
            return Err(Error::InvalidInput(format!(
                "trajectory needs at least 2 states, got {}",
                states.len()
            )));
        }
        let dim = states[0].dim();
        if states.iter().any(|s| s.dim() != dim) {
            return Err(Error::Shape("trajectory states differ in shape".into()));
        }
        Ok(Self { seed_id, states })
    }

    pub fn from_rollout(seed_id: u64, rollout: &Rollout) -> Result<Self> {
        Self::new(seed_id, rollout.states.iter().map(|s| s.data.clone()).collect())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupDistanceSummary {
    pub intra_low: f64,
    pub intra_high: f64,
    pub cross: f64,
}

fn frobenius(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

fn check_same_shape(items: &[Array2<f64>]) -> Result<()> {
    let dim = items[0].dim();
    if items.iter().any(|x| x.dim() != dim) {
        return Err(Error::Shape("inputs differ in shape".into()));
    }
    Ok(())
}

/// Mean Frobenius distance over unordered pairs.
pub fn pairwise_distance(items: &[Array2<f64>]) -> Result<f64> {
    if items.len() < 2 {
        return Err(Error::InvalidInput(format!(
            "pairwise distance needs at least 2 inputs, got {}",
            items.len()
        )));
    }
    check_same_shape(items)?;
    let mut total = 0.0;
    let mut pairs = 0usize;
    for i in 0..items.len() {
        for j in i + 1..items.len() {
            total += frobenius(&items[i], &items[j]);
            pairs += 1;
        }
    }
    Ok(total / pairs as f64)
}

fn owned(maps: &[AttentionMap]) -> Vec<Array2<f64>> {
    maps.iter().map(|m| m.view().to_owned()).collect()
}

pub fn pairwise_attention_distance(maps: &[AttentionMap]) -> Result<f64> {
    pairwise_distance(&owned(maps))
}

/// Mean distance between every (low, high) pair.
fn cross_distance(low: &[Array2<f64>], high: &[Array2<f64>]) -> Result<f64> {
    if low.is_empty() || high.is_empty() {
        return Err(Error::InvalidInput("cross distance needs two non-empty groups".into()));
    }
    if low[0].dim() != high[0].dim() {
        return Err(Error::Shape("groups differ in shape".into()));
    }
    let total: f64 = low.iter().flat_map(|a| high.iter().map(move |b| frobenius(a, b))).sum();
    Ok(total / (low.len() * high.len()) as f64)
}

pub fn group_summary(low: &[AttentionMap], high: &[AttentionMap]) -> Result<GroupDistanceSummary> {
    let (low, high) = (owned(low), owned(high));
    Ok(GroupDistanceSummary {
        intra_low: pairwise_distance(&low)?,
        intra_high: pairwise_distance(&high)?,
        cross: cross_distance(&low, &high)?,
    })
}

/// Second-order Butterworth low-pass (bilinear transform). `cutoff` is in
/// cycles per sample, `0 < cutoff < 0.5`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Butterworth2 {
    b: [f64; 3],
    a: [f64; 2],
}

impl Butterworth2 {
    pub fn new(cutoff: f64) -> Result<Self> {
        if !(cutoff > 0.0 && cutoff < 0.5) {
            return Err(Error::InvalidInput(format!("cutoff {cutoff} outside (0, 0.5)")));
        }
        let k = (std::f64::consts::PI * cutoff).tan();
        let k2 = k * k;
        let sqrt2 = std::f64::consts::SQRT_2;
        let norm = 1.0 / (1.0 + sqrt2 * k + k2);
        let b0 = k2 * norm;
        Ok(Self {
            b: [b0, 2.0 * b0, b0],
            a: [2.0 * (k2 - 1.0) * norm, (1.0 - sqrt2 * k + k2) * norm],
        })
    }

    /// Filters `x`, starting from the steady state of `x[0]`.
    pub fn filter(&self, x: &[f64]) -> Vec<f64> {
        let Some(&x0) = x.first() else {
            return Vec::new();
        };
        let (mut x1, mut x2, mut y1, mut y2) = (x0, x0, x0, x0);
        x.iter()
            .map(|&xn| {
                let yn = self.b[0] * xn + self.b[1] * x1 + self.b[2] * x2 - self.a[0] * y1 - self.a[1] * y2;
                x2 = x1;
                x1 = xn;
                y2 = y1;
                y1 = yn;
                yn
            })
            .collect()
    }
}

fn mean_squared_step(y: &[f64]) -> f64 {
    y.windows(2).map(|w| (w[1] - w[0]).powi(2)).sum::<f64>() / (y.len() - 1) as f64
}

/// Low-pass each latent coordinate along the step axis, then average the
/// squared first differences over steps and coordinates.
pub fn trajectory_variation(traj: &TrajectoryRecord, cutoff: f64) -> Result<f64> {
    if traj.states.len() < 3 {
        return Err(Error::InvalidInput(format!(
            "trajectory variation needs at least 3 states, got {}",
            traj.states.len()
        )));
    }
    let filter = Butterworth2::new(cutoff)?;
    let (rows, cols) = traj.states[0].dim();
    let mut total = 0.0;
    let mut series = vec![0.0; traj.states.len()];
    for i in 0..rows {
        for j in 0..cols {
            for (s, state) in series.iter_mut().zip(&traj.states) {
                *s = state[[i, j]];
            }
            total += mean_squared_step(&filter.filter(&series));
        }
    }
    Ok(total / (rows * cols) as f64)
}

/// Sample variance of each token row, averaged over rows.
pub fn intra_frame_variance(state: &LatentState) -> f64 {
    let d = state.dim();
    if d < 2 {
        return 0.0;
    }
    let total: f64 = state
        .data
        .axis_iter(Axis(0))
        .map(|row| {
            let mean = row.sum() / d as f64;
            row.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (d - 1) as f64
        })
        .sum();
    total / state.tokens() as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::masking::make_ensemble;
    use crate::rng::Stream;
    use approx::assert_abs_diff_eq;
    use ndarray::array;
    use proptest::prelude::*;

    fn random_map(n: usize, stream: Stream) -> AttentionMap {
        let v = stream.normals(n * n);
        crate::attention::softmax_rows(Array2::from_shape_vec((n, n), v).unwrap().view()).unwrap()
    }

    fn scalar_traj(xs: &[f64]) -> TrajectoryRecord {
        TrajectoryRecord::new(0, xs.iter().map(|x| array![[*x]]).collect()).unwrap()
    }

    #[test]
    fn distance_examples() {
        let a = random_map(5, Stream::new(1));
        assert_eq!(
            pairwise_attention_distance(&[a.clone(), a.clone(), a.clone()]).unwrap(),
            0.0
        );

        let anti = AttentionMap::permutation(&[1, 0]).unwrap();
        assert_abs_diff_eq!(
            pairwise_attention_distance(&[AttentionMap::identity(2), anti]).unwrap(),
            2.0,
            epsilon = 1e-15
        );
        assert!(pairwise_attention_distance(&[a]).is_err());
    }

    #[test]
    fn distance_matches_double_loop() {
        let root = Stream::new(7);
        let maps: Vec<_> = (0..3).map(|i| random_map(4, root.split(i))).collect();
        let mut oracle = 0.0;
        for (i, j) in [(0, 1), (0, 2), (1, 2)] {
            let mut ss = 0.0;
            for r in 0..4 {
                for c in 0..4 {
                    ss += (maps[i].row(r)[c] - maps[j].row(r)[c]).powi(2);
                }
            }
            oracle += ss.sqrt() / 3.0;
        }
        assert_abs_diff_eq!(pairwise_attention_distance(&maps).unwrap(), oracle, epsilon = 1e-12);
    }

    #[test]
    fn group_examples() {
        let a = random_map(4, Stream::new(1));
        let s = group_summary(&[a.clone(), a.clone()], &[a.clone(), a.clone()]).unwrap();
        assert_eq!(
            s,
            GroupDistanceSummary {
                intra_low: 0.0,
                intra_high: 0.0,
                cross: 0.0
            }
        );

        let b = random_map(4, Stream::new(2));
        let low = make_ensemble(&a, 6, 0.02, Stream::new(3)).unwrap();
        let high = make_ensemble(&b, 6, 0.02, Stream::new(4)).unwrap();
        let s = group_summary(low.samples(), high.samples()).unwrap();
        assert!(s.cross > s.intra_low && s.cross > s.intra_high, "{s:?}");
    }

    #[test]
    fn small_perturbations_cluster_tighter() {
        let a = random_map(16, Stream::new(5));
        let low = make_ensemble(&a, 10, 0.05, Stream::new(6)).unwrap();
        let high = make_ensemble(&a, 10, 0.5, Stream::new(7)).unwrap();
        let s = group_summary(low.samples(), high.samples()).unwrap();
        assert!(s.intra_low < s.intra_high, "{s:?}");
    }

    #[test]
    fn butterworth_dc_gain_and_nyquist_null() {
        let f = Butterworth2::new(0.25).unwrap();
        let y = f.filter(&[3.5; 20]);
        assert!(y.iter().all(|v| (v - 3.5).abs() < 1e-12));
        let alt: Vec<f64> = (0..200).map(|n| if n % 2 == 0 { 1.0 } else { -1.0 }).collect();
        let y = f.filter(&alt);
        assert!(y[150..].iter().all(|v| v.abs() < 1e-6));
        assert!(Butterworth2::new(0.5).is_err());
        assert!(Butterworth2::new(0.0).is_err());
    }

    #[test]
    fn variation_examples() {
        assert!(trajectory_variation(&scalar_traj(&[2.0; 10]), 0.25).unwrap() < 1e-24);

        // ramp: filtered slope settles to the input slope
        let slope = 0.3;
        let ramp: Vec<f64> = (0..300).map(|n| slope * n as f64).collect();
        let v = trajectory_variation(&scalar_traj(&ramp), 0.25).unwrap();
        assert!((v / (slope * slope) - 1.0).abs() < 0.1, "ramp variation {v}");

        // alternating noise on top of the ramp is almost entirely removed
        let amp = 0.5;
        let noisy: Vec<f64> = ramp
            .iter()
            .enumerate()
            .map(|(n, x)| x + if n % 2 == 0 { amp } else { -amp })
            .collect();
        let vn = trajectory_variation(&scalar_traj(&noisy), 0.25).unwrap();
        let unfiltered_noise = (2.0 * amp).powi(2);
        assert!((vn - v).abs() < 0.2 * unfiltered_noise, "{vn} vs {v}");

        assert!(trajectory_variation(&scalar_traj(&[1.0, 2.0]), 0.25).is_err());
        assert!(trajectory_variation(&scalar_traj(&[1.0, 2.0, 3.0]), 0.6).is_err());
        assert!(TrajectoryRecord::new(0, vec![array![[1.0]], array![[1.0, 2.0]]]).is_err());
    }

    #[test]
    fn intra_frame_examples() {
        let c = LatentState::new(Array2::from_elem((4, 8), 1.7), 0).unwrap();
        assert_eq!(intra_frame_variance(&c), 0.0);
        let rows = LatentState::new(array![[0.0, 0.0, 0.0], [1.0, 1.0, 1.0]], 0).unwrap();
        assert_eq!(intra_frame_variance(&rows), 0.0);

        let root = Stream::new(12);
        let mean = (0..100)
            .map(|i| intra_frame_variance(&LatentState::gaussian(16, 8, 0, root.split(i))))
            .sum::<f64>()
            / 100.0;
        assert!((mean - 1.0).abs() < 0.1, "mean variance {mean}");
    }

    proptest! {
        #[test]
        fn distance_symmetric(seed in any::<u64>(), count in 2usize..6) {
            let root = Stream::new(seed);
            let maps: Vec<_> = (0..count as u64).map(|i| random_map(5, root.split(i))).collect();
            let mut rev = maps.clone();
            rev.reverse();
            let a = pairwise_attention_distance(&maps).unwrap();
            let b = pairwise_attention_distance(&rev).unwrap();
            prop_assert!((a - b).abs() < 1e-12);
            prop_assert!(a > 1e-12);
        }

        #[test]
        fn variation_translation_invariant(seed in any::<u64>(), shift in -100.0f64..100.0) {
            let root = Stream::new(seed);
            let states: Vec<_> = (0..12).map(|i| crate::diffusion::gaussian_noise(3, 2, root.split(i))).collect();
            let moved: Vec<_> = states.iter().map(|s| s + shift).collect();
            let a = trajectory_variation(&TrajectoryRecord::new(0, states).unwrap(), 0.2).unwrap();
            let b = trajectory_variation(&TrajectoryRecord::new(0, moved).unwrap(), 0.2).unwrap();
            prop_assert!((a - b).abs() < 1e-9);
        }

        #[test]
        fn group_order_invariant(seed in any::<u64>()) {
            let root = Stream::new(seed);
            let low: Vec<_> = (0..4).map(|i| random_map(4, root.split(i))).collect();
            let high: Vec<_> = (4..8).map(|i| random_map(4, root.split(i))).collect();
            let mut low_r = low.clone();
            low_r.rotate_left(1);
            let mut high_r = high.clone();
            high_r.swap(0, 3);
            let a = group_summary(&low, &high).unwrap();
            let b = group_summary(&low_r, &high_r).unwrap();
            prop_assert!((a.intra_low - b.intra_low).abs() < 1e-12);
            prop_assert!((a.intra_high - b.intra_high).abs() < 1e-12);
            prop_assert!((a.cross - b.cross).abs() < 1e-12);
        }
    }
}
