//! Stochastic attention samples drawn from a single map.
//!
//! Each sample zeroes attention entries independently with the drop
//! probability and renormalizes rows. A row that loses all its mass keeps
//! its unmasked values, so `p = 1` reproduces the input map.

use ndarray::{Array2, Axis, Zip};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::attention::{softmax_rows, AttentionMap};
use crate::error::{Error, Result};
use crate::rng::Stream;

/// Masked row mass below this is treated as empty.
pub const EMPTY_ROW_MASS: f64 = 1e-12;

/// Keep (`true`) / drop (`false`) bits, row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BernoulliMask {
    rows: usize,
    cols: usize,
    bits: Vec<bool>,
}

impl BernoulliMask {
    pub fn ones(n: usize) -> Self {
        Self::ones_shaped(n, n)
    }

    pub fn ones_shaped(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            bits: vec![true; rows * cols],
        }
    }

    pub fn from_bits(n: usize, bits: Vec<bool>) -> Result<Self> {
        if bits.len() != n * n {
            return Err(Error::Shape(format!("mask of {} bits for n = {n}", bits.len())));
        }
        Ok(Self { rows: n, cols: n, bits })
    }

    pub fn n(&self) -> usize {
        self.rows
    }

    pub fn dim(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn get(&self, i: usize, j: usize) -> bool {
        self.bits[i * self.cols + j]
    }

    pub fn kept(&self) -> usize {
        self.bits.iter().filter(|b| **b).count()
    }
}

fn check_drop_prob(drop_prob: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&drop_prob) {
        return Err(Error::InvalidInput(format!(
            "drop probability {drop_prob} outside [0, 1]"
        )));
    }
    Ok(())
}

/// `n x n` mask; each bit is 0 with probability `drop_prob`.
pub fn sample_mask(n: usize, drop_prob: f64, stream: Stream) -> Result<BernoulliMask> {
    sample_mask_shaped(n, n, drop_prob, stream)
}

pub fn sample_mask_shaped(rows: usize, cols: usize, drop_prob: f64, stream: Stream) -> Result<BernoulliMask> {
    check_drop_prob(drop_prob)?;
    let mut rng = stream.rng();
    // u ∈ [0, 1): p = 0 keeps everything, p = 1 drops everything
    let bits = (0..rows * cols).map(|_| rng.gen::<f64>() >= drop_prob).collect();
    Ok(BernoulliMask { rows, cols, bits })
}

pub fn apply_mask(a: &AttentionMap, m: &BernoulliMask) -> Result<AttentionMap> {
    if m.dim() != a.dim() {
        return Err(Error::Shape(format!("map is {:?}, mask is {:?}", a.dim(), m.dim())));
    }
    let mut out = a.view().to_owned();
    for (i, mut row) in out.axis_iter_mut(Axis(0)).enumerate() {
        let mut dropped = false;
        for (j, x) in row.iter_mut().enumerate() {
            if !m.get(i, j) {
                dropped = true;
                *x = 0.0;
            }
        }
        if !dropped {
            continue;
        }
        let sum = row.sum();
        if sum < EMPTY_ROW_MASS {
            row.assign(&a.row(i));
        } else {
            row.mapv_inplace(|x| x / sum);
        }
    }
    Ok(AttentionMap::from_trusted(out))
}

/// `K` stochastic attention samples sharing one token count.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionEnsemble {
    samples: Vec<AttentionMap>,
    source_layer: usize,
    seed_id: u64,
}

impl AttentionEnsemble {
    pub fn new(samples: Vec<AttentionMap>) -> Result<Self> {
        let Some(first) = samples.first() else {
            return Err(Error::InvalidInput("ensemble needs at least one sample".into()));
        };
        let dim = first.dim();
        if let Some(bad) = samples.iter().find(|s| s.dim() != dim) {
            return Err(Error::Shape(format!("ensemble mixes {dim:?} and {:?} maps", bad.dim())));
        }
        Ok(Self {
            samples,
            source_layer: 0,
            seed_id: 0,
        })
    }

    pub fn labeled(mut self, seed_id: u64, source_layer: usize) -> Self {
        self.seed_id = seed_id;
        self.source_layer = source_layer;
        self
    }

    pub fn samples(&self) -> &[AttentionMap] {
        &self.samples
    }

    pub fn k(&self) -> usize {
        self.samples.len()
    }

    pub fn n(&self) -> usize {
        self.samples[0].n()
    }

    pub fn dim(&self) -> (usize, usize) {
        self.samples[0].dim()
    }

    pub fn source_layer(&self) -> usize {
        self.source_layer
    }

    pub fn seed_id(&self) -> u64 {
        self.seed_id
    }

    /// Element-wise mean of the samples (row-stochastic).
    ///
    /// Accumulated as offsets from the first sample, so an ensemble of
    /// identical samples has a mean bitwise equal to them.
    pub fn mean_map(&self) -> AttentionMap {
        let first = self.samples[0].view();
        let mut offset = Array2::<f64>::zeros(first.dim());
        for s in &self.samples[1..] {
            offset += &(&s.view() - &first);
        }
        offset /= self.k() as f64;
        AttentionMap::from_trusted(&first + &offset)
    }
}

/// Sample `i` uses the mask drawn from `stream.split(i)`.
pub fn make_ensemble(a: &AttentionMap, k: usize, drop_prob: f64, stream: Stream) -> Result<AttentionEnsemble> {
    if k == 0 {
        return Err(Error::InvalidInput("ensemble size K must be >= 1".into()));
    }
    check_drop_prob(drop_prob)?;
    let samples = (0..k as u64)
        .map(|i| {
            let (rows, cols) = a.dim();
            let mask = sample_mask_shaped(rows, cols, drop_prob, stream.split(i))?;
            apply_mask(a, &mask)
        })
        .collect::<Result<Vec<_>>>()?;
    AttentionEnsemble::new(samples)
}

/// Gaussian jitter of the log-attention before re-applying softmax.
/// Zero entries stay zero.
pub fn jitter_map(a: &AttentionMap, sigma: f64, stream: Stream) -> Result<AttentionMap> {
    if !(sigma >= 0.0 && sigma.is_finite()) {
        return Err(Error::InvalidInput(format!("jitter scale {sigma}")));
    }
    let mut rng = stream.rng();
    let mut logits = Array2::<f64>::zeros(a.dim());
    let mut zero = Array2::from_elem(a.dim(), false);
    Zip::from(&mut logits)
        .and(&mut zero)
        .and(&a.view())
        .for_each(|l, z, &p| {
            let eps: f64 = StandardNormal.sample(&mut rng);
            if p > 0.0 {
                *l = p.ln() + sigma * eps;
            } else {
                *z = true;
            }
        });
    // zero entries get a finite placeholder, then are cleared after softmax
    for (mut row, zrow) in logits.axis_iter_mut(Axis(0)).zip(zero.axis_iter(Axis(0))) {
        let min = row
            .iter()
            .zip(zrow.iter())
            .filter(|(_, z)| !**z)
            .map(|(l, _)| *l)
            .fold(f64::INFINITY, f64::min);
        for (l, z) in row.iter_mut().zip(zrow.iter()) {
            if *z {
                *l = min;
            }
        }
    }
    let soft = softmax_rows(logits.view())?.into_inner();
    let mut out = soft;
    for (mut row, zrow) in out.axis_iter_mut(Axis(0)).zip(zero.axis_iter(Axis(0))) {
        row.zip_mut_with(&zrow, |x, z| {
            if *z {
                *x = 0.0;
            }
        });
        let sum = row.sum();
        row.mapv_inplace(|x| x / sum);
    }
    Ok(AttentionMap::from_trusted(out))
}

/// Source of stochasticity for an attention ensemble.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Perturbation {
    /// Bernoulli masking with row renormalization.
    Mask { drop_prob: f64 },
    /// Logit-space Gaussian jitter, a stand-in for weight dropout.
    LogitJitter { sigma: f64 },
}

impl Perturbation {
    pub fn ensemble(&self, a: &AttentionMap, k: usize, stream: Stream) -> Result<AttentionEnsemble> {
        match *self {
            Perturbation::Mask { drop_prob } => make_ensemble(a, k, drop_prob, stream),
            Perturbation::LogitJitter { sigma } => {
                if k == 0 {
                    return Err(Error::InvalidInput("ensemble size K must be >= 1".into()));
                }
                let samples = (0..k as u64)
                    .map(|i| jitter_map(a, sigma, stream.split(i)))
                    .collect::<Result<Vec<_>>>()?;
                AttentionEnsemble::new(samples)
            }
        }
    }
}
