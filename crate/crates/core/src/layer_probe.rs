//! Layer truncation depth from cumulative per-layer scores.
//!
//! For a pool of seeds, the cumulative average of per-layer scores up to
//! depth `d` is correlated (Pearson, across the pool) with the all-layer
//! average. The truncation depth is the first `d` whose correlation reaches
//! `tau`. Depths are 0-based here; reports add 1.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_TAU: f64 = 0.7;

/// Per-seed, per-layer scores (`M x L`).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreTable {
    seed_ids: Vec<u64>,
    rows: Vec<Vec<f64>>,
}

impl ScoreTable {
    pub fn new(seed_ids: Vec<u64>, rows: Vec<Vec<f64>>) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::InvalidInput("score table has no rows".into()));
        }
        if seed_ids.len() != rows.len() {
            return Err(Error::Shape(format!(
                "{} seed ids for {} rows",
                seed_ids.len(),
                rows.len()
            )));
        }
        let layers = rows[0].len();
        if layers == 0 {
            return Err(Error::InvalidInput("score table has no layers".into()));
        }
        if rows.iter().any(|r| r.len() != layers) {
            return Err(Error::Shape("score table is not rectangular".into()));
        }
        if rows.iter().flatten().any(|x| !x.is_finite()) {
            return Err(Error::InvalidInput("score table has non-finite entries".into()));
        }
        Ok(Self { seed_ids, rows })
    }

    /// Rows labelled `0..M`.
    pub fn from_rows(rows: Vec<Vec<f64>>) -> Result<Self> {
        let ids = (0..rows.len() as u64).collect();
        Self::new(ids, rows)
    }

    pub fn seeds(&self) -> usize {
        self.rows.len()
    }

    pub fn layers(&self) -> usize {
        self.rows[0].len()
    }

    pub fn seed_ids(&self) -> &[u64] {
        &self.seed_ids
    }

    pub fn rows(&self) -> &[Vec<f64>] {
        &self.rows
    }

    pub fn column(&self, layer: usize) -> Vec<f64> {
        self.rows.iter().map(|r| r[layer]).collect()
    }

    /// Stack several tables (e.g. one per prompt) into one pool.
    pub fn concat(tables: &[ScoreTable]) -> Result<Self> {
        let mut ids = Vec::new();
        let mut rows = Vec::new();
        for t in tables {
            ids.extend_from_slice(&t.seed_ids);
            rows.extend(t.rows.iter().cloned());
        }
        Self::new(ids, rows)
    }
}

/// Entry `(i, d)` is the mean of `table[i][0..=d]`.
pub fn cumulative_scores(table: &ScoreTable) -> Vec<Vec<f64>> {
    table
        .rows
        .iter()
        .map(|row| {
            let mut sum = 0.0;
            row.iter()
                .enumerate()
                .map(|(d, x)| {
                    sum += x;
                    sum / (d + 1) as f64
                })
                .collect()
        })
        .collect()
}

fn centered_sum_squares(v: &[f64]) -> (f64, Vec<f64>) {
    let mean = v.iter().sum::<f64>() / v.len() as f64;
    let c: Vec<f64> = v.iter().map(|x| x - mean).collect();
    (c.iter().map(|x| x * x).sum(), c)
}

fn is_flat(v: &[f64], ss: f64) -> bool {
    let scale = v.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    ss <= v.len() as f64 * (1e-13 * scale).powi(2)
}

/// Sample Pearson correlation.
pub fn pearson(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::Shape(format!("lengths {} and {}", x.len(), y.len())));
    }
    if x.len() < 2 {
        return Err(Error::InvalidInput("correlation needs at least two points".into()));
    }
    let (sxx, cx) = centered_sum_squares(x);
    let (syy, cy) = centered_sum_squares(y);
    if is_flat(x, sxx) {
        return Err(Error::DegenerateCorrelation("x"));
    }
    if is_flat(y, syy) {
        return Err(Error::DegenerateCorrelation("y"));
    }
    let sxy: f64 = cx.iter().zip(&cy).map(|(a, b)| a * b).sum();
    Ok((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

/// Ranks starting at 1, ties share their average rank.
pub fn ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut out = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let rank = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            out[k] = rank;
        }
        i = j + 1;
    }
    out
}

/// Spearman rank correlation (Pearson on average ranks).
pub fn spearman(x: &[f64], y: &[f64]) -> Result<f64> {
    pearson(&ranks(x), &ranks(y))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerProfile {
    /// Pool mean of each layer's score.
    pub per_layer: Vec<f64>,
    /// Pool mean of the cumulative score at each depth.
    pub cumulative: Vec<f64>,
    /// Correlation of depth `d` with the full depth; `None` where a column
    /// has no variance across the pool.
    pub corr_curve: Vec<Option<f64>>,
    pub d_star: usize,
    pub tau: f64,
}

impl LayerProfile {
    /// 1-based depth for reports.
    pub fn d_star_1based(&self) -> usize {
        self.d_star + 1
    }
}

fn column_means(rows: &[Vec<f64>]) -> Vec<f64> {
    let m = rows.len() as f64;
    let l = rows[0].len();
    (0..l).map(|d| rows.iter().map(|r| r[d]).sum::<f64>() / m).collect()
}

fn profile_from_cumulative(table: &ScoreTable, cumulative: &[Vec<f64>], tau: f64) -> LayerProfile {
    let layers = table.layers();
    let col = |d: usize| -> Vec<f64> { cumulative.iter().map(|r| r[d]).collect() };
    let full = col(layers - 1);
    let corr_curve: Vec<Option<f64>> = (0..layers).map(|d| pearson(&col(d), &full).ok()).collect();
    let d_star = corr_curve
        .iter()
        .position(|c| matches!(c, Some(r) if *r >= tau))
        .unwrap_or(layers - 1);
    LayerProfile {
        per_layer: column_means(table.rows()),
        cumulative: column_means(cumulative),
        corr_curve,
        d_star,
        tau,
    }
}

fn check_tau(tau: f64) -> Result<()> {
    if !(-1.0..=1.0).contains(&tau) {
        return Err(Error::InvalidInput(format!("tau {tau} outside [-1, 1]")));
    }
    Ok(())
}

/// Smallest depth whose cumulative score correlates with the full-depth
/// score at least `tau` across the pool; the last layer if none does.
/// Depths with a constant cumulative column are skipped.
pub fn select_depth(table: &ScoreTable, tau: f64) -> Result<LayerProfile> {
    check_tau(tau)?;
    if table.seeds() < 2 {
        return Err(Error::InsufficientPool {
            needed: 2,
            got: table.seeds(),
        });
    }
    Ok(profile_from_cumulative(table, &cumulative_scores(table), tau))
}

/// Variant that first averages consecutive groups of `group_size` rows
/// (e.g. the seeds of one prompt) and correlates the group means.
pub fn select_depth_grouped(table: &ScoreTable, group_size: usize, tau: f64) -> Result<LayerProfile> {
    check_tau(tau)?;
    if group_size == 0 || !table.seeds().is_multiple_of(group_size) {
        return Err(Error::InvalidInput(format!(
            "{} rows do not split into groups of {group_size}",
            table.seeds()
        )));
    }
    let groups = table.seeds() / group_size;
    if groups < 2 {
        return Err(Error::InsufficientPool { needed: 2, got: groups });
    }
    let rows: Vec<Vec<f64>> = table.rows().chunks(group_size).map(column_means).collect();
    let ids = table.seed_ids().iter().step_by(group_size).copied().collect();
    let averaged = ScoreTable::new(ids, rows)?;
    Ok(profile_from_cumulative(&averaged, &cumulative_scores(&averaged), tau))
}

/// Cumulative score at `d_star` for every seed.
pub fn truncated_pool_scores(table: &ScoreTable, d_star: usize) -> Result<Vec<f64>> {
    if d_star >= table.layers() {
        return Err(Error::InvalidInput(format!(
            "depth {d_star} out of range for {} layers",
            table.layers()
        )));
    }
    Ok(cumulative_scores(table).into_iter().map(|r| r[d_star]).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Stream;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn table(rows: Vec<Vec<f64>>) -> ScoreTable {
        ScoreTable::from_rows(rows).unwrap()
    }

    /// Layer `l` = per-seed signal + noise with sd `3 · 0.6^l`.
    fn decaying_noise_table(m: usize, l: usize, seed: u64) -> ScoreTable {
        let root = Stream::new(seed);
        let signal = root.tagged("signal").normals(m);
        let rows = (0..m)
            .map(|i| {
                let noise = root.tagged("noise").split(i as u64).normals(l);
                (0..l)
                    .map(|d| signal[i] + 3.0 * 0.6f64.powi(d as i32) * noise[d])
                    .collect()
            })
            .collect();
        table(rows)
    }

    /// Textbook single-pass Pearson, independent of `pearson`.
    fn pearson_oracle(x: &[f64], y: &[f64]) -> f64 {
        let n = x.len() as f64;
        let (mut sx, mut sy, mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0, 0.0, 0.0);
        for (a, b) in x.iter().zip(y) {
            sx += a;
            sy += b;
            sxx += a * a;
            syy += b * b;
            sxy += a * b;
        }
        (n * sxy - sx * sy) / ((n * sxx - sx * sx).sqrt() * (n * syy - sy * sy).sqrt())
    }

    #[test]
    fn cumulative_examples() {
        assert_eq!(cumulative_scores(&table(vec![vec![1.0, 3.0]])), vec![vec![1.0, 2.0]]);
        assert_eq!(
            cumulative_scores(&table(vec![vec![4.0], vec![5.0]])),
            vec![vec![4.0], vec![5.0]]
        );
        assert_eq!(cumulative_scores(&table(vec![vec![0.25; 6]])), vec![vec![0.25; 6]]);
        assert!(ScoreTable::from_rows(vec![]).is_err());
        assert!(ScoreTable::from_rows(vec![vec![1.0], vec![1.0, 2.0]]).is_err());
        assert!(ScoreTable::from_rows(vec![vec![f64::NAN]]).is_err());
    }

    #[test]
    fn pearson_examples() {
        let x = [1.0, 2.0, 3.0, 7.0];
        assert_abs_diff_eq!(pearson(&x, &x).unwrap(), 1.0, epsilon = 1e-15);
        let neg: Vec<f64> = x.iter().map(|v| -v).collect();
        assert_abs_diff_eq!(pearson(&x, &neg).unwrap(), -1.0, epsilon = 1e-15);
        // cov = 1.5, sd_x = 1, sd_y = sqrt(7/3): r = 1.5 / sqrt(7/3)
        let r = pearson(&[1.0, 2.0, 3.0], &[1.0, 2.0, 4.0]).unwrap();
        assert_abs_diff_eq!(r, 1.5 / (7.0f64 / 3.0).sqrt(), epsilon = 1e-15);
        assert_abs_diff_eq!(r, 0.9820, epsilon = 5e-5);
        assert!(matches!(
            pearson(&[2.0, 2.0, 2.0], &[1.0, 2.0, 3.0]),
            Err(Error::DegenerateCorrelation("x"))
        ));
        assert!(matches!(
            pearson(&[1.0, 2.0], &[0.3, 0.3]),
            Err(Error::DegenerateCorrelation("y"))
        ));
        assert!(pearson(&[1.0], &[1.0]).is_err());
    }

    #[test]
    fn spearman_handles_ties() {
        assert_eq!(ranks(&[3.0, 1.0, 3.0, 2.0]), vec![3.5, 1.0, 3.5, 2.0]);
        let r = spearman(&[1.0, 2.0, 3.0, 4.0], &[10.0, 20.0, 30.0, 1000.0]).unwrap();
        assert_abs_diff_eq!(r, 1.0, epsilon = 1e-15);
    }

    #[test]
    fn select_depth_examples() {
        let single = table(vec![vec![0.1], vec![0.3], vec![0.2]]);
        assert_eq!(select_depth(&single, 0.7).unwrap().d_star, 0);

        let redundant = table((0..5).map(|i| vec![0.1 * i as f64 + 0.05; 6]).collect());
        let p = select_depth(&redundant, 0.7).unwrap();
        assert_eq!(p.d_star, 0);
        assert_eq!(p.d_star_1based(), 1);

        assert!(matches!(
            select_depth(&table(vec![vec![1.0, 2.0]]), 0.7),
            Err(Error::InsufficientPool { needed: 2, got: 1 })
        ));
    }

    #[test]
    fn decaying_noise_crosses_early_and_matches_scan() {
        let t = decaying_noise_table(200, 10, 5);
        let p = select_depth(&t, 0.7).unwrap();
        let cum = cumulative_scores(&t);
        let col = |d: usize| -> Vec<f64> { cum.iter().map(|r| r[d]).collect() };
        let scan = (0..10).find(|&d| pearson_oracle(&col(d), &col(9)) >= 0.7).unwrap();
        assert_eq!(p.d_star, scan);
        assert!(p.d_star < 9, "d* = {}", p.d_star);
        assert!(p.d_star > 0, "fixture should not cross at the first layer");
        for d in 0..10 {
            assert_abs_diff_eq!(
                p.corr_curve[d].unwrap(),
                pearson_oracle(&col(d), &col(9)),
                epsilon = 1e-10
            );
        }
        assert_abs_diff_eq!(p.corr_curve[9].unwrap(), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn degenerate_columns_are_skipped() {
        // layer 0 identical across seeds -> no correlation at depth 0
        let t = table(vec![vec![0.5, 0.1, 0.2], vec![0.5, 0.4, 0.3], vec![0.5, 0.9, 0.1]]);
        let p = select_depth(&t, 0.0).unwrap();
        assert_eq!(p.corr_curve[0], None);
        assert!(p.d_star >= 1);

        let flat = table(vec![vec![0.0; 4]; 3]);
        let p = select_depth(&flat, 0.7).unwrap();
        assert!(p.corr_curve.iter().all(Option::is_none));
        assert_eq!(p.d_star, 3);
    }

    #[test]
    fn grouped_variant() {
        let t = decaying_noise_table(40, 6, 9);
        let p = select_depth_grouped(&t, 4, 0.7).unwrap();
        assert_eq!(p.corr_curve.len(), 6);
        assert_abs_diff_eq!(p.corr_curve[5].unwrap(), 1.0, epsilon = 1e-12);
        assert!(select_depth_grouped(&t, 3, 0.7).is_err());
        assert!(matches!(
            select_depth_grouped(&t, 40, 0.7),
            Err(Error::InsufficientPool { .. })
        ));
    }

    #[test]
    fn truncated_scores() {
        let t = decaying_noise_table(10, 8, 3);
        let full = truncated_pool_scores(&t, 7).unwrap();
        for (row, f) in t.rows().iter().zip(&full) {
            assert_abs_diff_eq!(*f, row.iter().sum::<f64>() / 8.0, epsilon = 1e-12);
        }
        let one = table(vec![vec![0.2, 0.4, 0.9]]);
        assert_abs_diff_eq!(truncated_pool_scores(&one, 1).unwrap()[0], 0.3, epsilon = 1e-15);
        assert!(matches!(truncated_pool_scores(&t, 8), Err(Error::InvalidInput(_))));
    }

    #[test]
    fn truncated_ranking_tracks_full_ranking() {
        // Layer 0 is uninformative; deeper layers carry a strong per-seed
        // signal, so the correlation jumps past tau at depth 1.
        let root = Stream::new(21);
        let signal = root.tagged("signal").normals(10);
        let rows = (0..10)
            .map(|i| {
                let noise = root.tagged("noise").split(i).normals(8);
                let mut row = vec![noise[0]];
                row.extend((1..8).map(|d| 10.0 * signal[i as usize] + 0.5 * noise[d]));
                row
            })
            .collect();
        let t = table(rows);
        let p = select_depth(&t, 0.7).unwrap();
        assert_eq!(p.d_star, 1);
        let trunc = truncated_pool_scores(&t, p.d_star).unwrap();
        let full = truncated_pool_scores(&t, 7).unwrap();
        let rho = spearman(&trunc, &full).unwrap();
        assert!(rho >= 0.9, "spearman {rho}");
    }

    proptest! {
        #[test]
        fn depth_is_monotone_in_tau(seed in any::<u64>(), t1 in -1.0f64..=1.0, t2 in -1.0f64..=1.0) {
            let t = decaying_noise_table(12, 6, seed);
            let (lo, hi) = if t1 <= t2 { (t1, t2) } else { (t2, t1) };
            prop_assert!(select_depth(&t, lo).unwrap().d_star <= select_depth(&t, hi).unwrap().d_star);
        }

        #[test]
        fn affine_invariance(seed in any::<u64>(), scale in 0.01f64..100.0, shift in -10.0f64..10.0) {
            let t = decaying_noise_table(12, 6, seed);
            let moved = table(t.rows().iter().map(|r| r.iter().map(|x| scale * x + shift).collect()).collect());
            let a = select_depth(&t, 0.7).unwrap();
            let b = select_depth(&moved, 0.7).unwrap();
            prop_assert_eq!(a.d_star, b.d_star);
            for (x, y) in a.corr_curve.iter().zip(&b.corr_curve) {
                prop_assert!((x.unwrap() - y.unwrap()).abs() < 1e-9);
            }
        }

        #[test]
        fn cumulative_matches_prefix_mean(seed in any::<u64>()) {
            let t = decaying_noise_table(5, 7, seed);
            let cum = cumulative_scores(&t);
            for (row, c) in t.rows().iter().zip(&cum) {
                for d in 0..7 {
                    let mean = row[..=d].iter().sum::<f64>() / (d + 1) as f64;
                    prop_assert!((c[d] - mean).abs() <= 1e-12);
                }
            }
        }
    }
}
