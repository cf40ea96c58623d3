//! Acquisition scores over attention ensembles.
//!
//! `bansa` is the entropy of the mean map minus the mean of per-sample
//! entropies. It is zero exactly when every sample agrees and positive
//! otherwise (entropy is strictly concave). `bansa_e` applies it to
//! Bernoulli-masked copies of a single map.

use serde::{Deserialize, Serialize};

use crate::attention::{entropy, AttentionMap};
use crate::error::{Error, Result};
use crate::masking::{make_ensemble, AttentionEnsemble, Perturbation};
use crate::rng::Stream;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreKind {
    Entropy,
    Bansa,
    BansaE,
    BaldReference,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AcquisitionScore {
    pub value: f64,
    pub kind: ScoreKind,
    pub k_used: usize,
    pub layer: usize,
}

/// Probability vector, nonnegative and summing to 1 within 1e-9.
#[derive(Clone, Debug, PartialEq)]
pub struct DiscreteDistribution(Vec<f64>);

impl DiscreteDistribution {
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.is_empty() {
            return Err(Error::InvalidInput("empty distribution".into()));
        }
        if probs.iter().any(|p| !p.is_finite() || *p < 0.0) {
            return Err(Error::InvalidInput(format!("invalid probabilities {probs:?}")));
        }
        let sum: f64 = probs.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidInput(format!("probabilities sum to {sum}")));
        }
        Ok(Self(probs))
    }

    pub fn probs(&self) -> &[f64] {
        &self.0
    }
}

fn shannon(p: &[f64]) -> f64 {
    let mut h = 0.0;
    for &x in p {
        if x > 0.0 {
            h -= x * x.ln();
        }
    }
    h
}

/// Mutual-information estimate from `K` predictive distributions:
/// `H(mean) − mean(H)`.
pub fn bald_reference(dists: &[DiscreteDistribution]) -> Result<AcquisitionScore> {
    let Some(first) = dists.first() else {
        return Err(Error::InvalidInput("BALD needs at least one distribution".into()));
    };
    let len = first.0.len();
    if dists.iter().any(|d| d.0.len() != len) {
        return Err(Error::Shape("distributions differ in length".into()));
    }
    let k = dists.len() as f64;
    let mut mean = vec![0.0; len];
    for d in dists {
        for (m, p) in mean.iter_mut().zip(&d.0) {
            *m += p;
        }
    }
    for m in &mut mean {
        *m /= k;
    }
    let mean_of_entropies = dists.iter().map(|d| shannon(&d.0)).sum::<f64>() / k;
    Ok(AcquisitionScore {
        value: shannon(&mean) - mean_of_entropies,
        kind: ScoreKind::BaldReference,
        k_used: dists.len(),
        layer: 0,
    })
}

/// Mean of per-sample entropies, accumulated as offsets from the first.
fn mean_sample_entropy(ensemble: &AttentionEnsemble) -> f64 {
    let hs: Vec<f64> = ensemble.samples().iter().map(|s| entropy(s).value()).collect();
    let offset: f64 = hs[1..].iter().map(|h| h - hs[0]).sum();
    hs[0] + offset / hs.len() as f64
}

pub fn bansa(ensemble: &AttentionEnsemble) -> AcquisitionScore {
    let predictive = entropy(&ensemble.mean_map()).value();
    AcquisitionScore {
        value: predictive - mean_sample_entropy(ensemble),
        kind: ScoreKind::Bansa,
        k_used: ensemble.k(),
        layer: ensemble.source_layer(),
    }
}

/// `bansa` of `K` Bernoulli-masked copies of `a`.
pub fn bansa_e(a: &AttentionMap, k: usize, drop_prob: f64, stream: Stream) -> Result<AcquisitionScore> {
    let ensemble = make_ensemble(a, k, drop_prob, stream)?;
    Ok(AcquisitionScore {
        kind: ScoreKind::BansaE,
        ..bansa(&ensemble)
    })
}

/// `bansa` under an arbitrary perturbation source. Masking reports as
/// `BansaE`, other sources as `Bansa`.
pub fn bansa_perturbed(
    a: &AttentionMap,
    k: usize,
    perturbation: Perturbation,
    stream: Stream,
) -> Result<AcquisitionScore> {
    let ensemble = perturbation.ensemble(a, k, stream)?;
    let kind = match perturbation {
        Perturbation::Mask { .. } => ScoreKind::BansaE,
        Perturbation::LogitJitter { .. } => ScoreKind::Bansa,
    };
    Ok(AcquisitionScore {
        kind,
        ..bansa(&ensemble)
    })
}

/// Entropy of the mean map only.
pub fn predictive_entropy_score(ensemble: &AttentionEnsemble) -> AcquisitionScore {
    AcquisitionScore {
        value: entropy(&ensemble.mean_map()).value(),
        kind: ScoreKind::Entropy,
        k_used: ensemble.k(),
        layer: ensemble.source_layer(),
    }
}
