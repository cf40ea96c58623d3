//! Seed pool scoring and selection.
//!
//! Every candidate latent is probed once at the configured timestep(s),
//! scored per layer, averaged up to the truncation depth, and the seed with
//! the lowest score (or highest, for the reversed control) is rolled out.

use std::collections::BTreeMap;
use std::time::Instant;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::acquisition::{bansa_perturbed, predictive_entropy_score};
use crate::analysis::{intra_frame_variance, pairwise_attention_distance, trajectory_variation, TrajectoryRecord};
use crate::attention::AttentionMap;
use crate::diffusion::{
    rollout, rollout_until, DdimConvention, LatentState, NoiseSchedule, PromptEmbedding, Rollout, ToyDenoiser,
};
use crate::error::{Error, Result};
use crate::io::config::RunConfig;
use crate::layer_probe::{select_depth, truncated_pool_scores, LayerProfile, ScoreTable};
use crate::masking::{make_ensemble, Perturbation};
use crate::rng::Stream;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Criterion {
    #[default]
    Argmin,
    /// Reversed control: keep the most uncertain seed.
    Argmax,
}

/// Per-seed scoring rule.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Acquisition {
    /// Disagreement of Bernoulli-masked attention samples.
    #[default]
    BansaE,
    /// Entropy of the mean masked map only.
    Entropy,
    /// Disagreement under logit jitter.
    Jitter,
    /// Uniform random scores (baseline).
    Random,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SeedCandidate {
    pub seed_id: u64,
    pub rng_seed: u64,
    pub latent: LatentState,
    pub score: Option<f64>,
}

/// `m` standard normal latents at timestep `t`, seed `i` drawn from
/// sub-stream `i` of the pool stream.
pub fn build_pool(m: usize, base_seed: u64, tokens: usize, dim: usize, t: usize) -> Result<Vec<SeedCandidate>> {
    if m == 0 {
        return Err(Error::InvalidInput("pool size must be >= 1".into()));
    }
    let root = Stream::new(base_seed).tagged("pool");
    Ok((0..m as u64)
        .map(|i| {
            let stream = root.split(i);
            SeedCandidate {
                seed_id: i,
                rng_seed: stream.key(),
                latent: LatentState::gaussian(tokens, dim, t, stream),
                score: None,
            }
        })
        .collect())
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScoringParams {
    pub k: usize,
    pub acquisition: Acquisition,
    pub perturbation: Perturbation,
    /// Probe timesteps, latest first; scores are averaged over them.
    pub probe_timesteps: Vec<usize>,
    pub convention: DdimConvention,
    pub parallel: bool,
}

impl ScoringParams {
    pub fn from_config(cfg: &RunConfig) -> Self {
        Self {
            k: cfg.k,
            acquisition: cfg.acquisition,
            perturbation: cfg.perturbation(),
            probe_timesteps: cfg.probe_timesteps(),
            convention: cfg.convention,
            parallel: cfg.parallel,
        }
    }
}

/// Latent probed at each timestep: the start latent itself when the probe
/// is the start step, otherwise a DDIM rollout down to it.
fn probe_latents(
    candidate: &SeedCandidate,
    denoiser: &ToyDenoiser,
    prompt: &PromptEmbedding,
    sched: &NoiseSchedule,
    params: &ScoringParams,
) -> Result<Vec<LatentState>> {
    let lowest = *params.probe_timesteps.iter().min().expect("at least one probe step");
    let start = &candidate.latent;
    if lowest == start.t {
        return Ok(vec![start.clone()]);
    }
    let traj = rollout_until(denoiser, start, prompt, sched, params.convention, lowest)?;
    params
        .probe_timesteps
        .iter()
        .map(|&t| {
            traj.states
                .iter()
                .find(|s| s.t == t)
                .cloned()
                .ok_or_else(|| Error::InvalidInput(format!("probe timestep {t} above start {}", start.t)))
        })
        .collect()
}

fn map_score(map: &AttentionMap, params: &ScoringParams, stream: Stream) -> Result<f64> {
    Ok(match params.acquisition {
        Acquisition::BansaE | Acquisition::Jitter => bansa_perturbed(map, params.k, params.perturbation, stream)?.value,
        Acquisition::Entropy => {
            let drop_prob = match params.perturbation {
                Perturbation::Mask { drop_prob } => drop_prob,
                Perturbation::LogitJitter { .. } => 0.0,
            };
            predictive_entropy_score(&make_ensemble(map, params.k, drop_prob, stream)?).value
        }
        Acquisition::Random => stream.rng().gen::<f64>(),
    })
}

/// Per-layer scores of one candidate, averaged over the probe timesteps.
/// Randomness for layer `l` at timestep `t` comes from
/// `stream.split(seed_id).split(t).split(l)`.
pub fn seed_layer_scores(
    candidate: &SeedCandidate,
    denoiser: &ToyDenoiser,
    prompt: &PromptEmbedding,
    sched: &NoiseSchedule,
    params: &ScoringParams,
    stream: Stream,
) -> Result<Vec<f64>> {
    let seed_stream = stream.split(candidate.seed_id);
    let mut sums = vec![0.0; denoiser.layer_count()];
    for z in probe_latents(candidate, denoiser, prompt, sched, params)? {
        let maps = denoiser.attention_probe(&z, prompt, z.t)?;
        let t_stream = seed_stream.split(z.t as u64);
        for (l, (map, sum)) in maps.iter().zip(sums.iter_mut()).enumerate() {
            *sum += map_score(map, params, t_stream.split(l as u64))?;
        }
    }
    let window = params.probe_timesteps.len() as f64;
    Ok(sums.into_iter().map(|s| s / window).collect())
}

#[derive(Clone, Debug, PartialEq)]
pub struct PoolScores {
    /// All layers, rows in pool order.
    pub table: ScoreTable,
    /// Cumulative score at `d_star`, one per seed.
    pub truncated: Vec<f64>,
    pub d_star: usize,
}

pub fn score_pool(
    pool: &[SeedCandidate],
    denoiser: &ToyDenoiser,
    prompt: &PromptEmbedding,
    sched: &NoiseSchedule,
    params: &ScoringParams,
    d_star: usize,
    stream: Stream,
) -> Result<PoolScores> {
    if pool.is_empty() {
        return Err(Error::InvalidInput("empty pool".into()));
    }
    if params.probe_timesteps.is_empty() {
        return Err(Error::InvalidInput("no probe timesteps".into()));
    }
    if d_star >= denoiser.layer_count() {
        return Err(Error::InvalidInput(format!(
            "depth {d_star} out of range for {} layers",
            denoiser.layer_count()
        )));
    }
    let score = |c: &SeedCandidate| seed_layer_scores(c, denoiser, prompt, sched, params, stream);
    // collect() keeps pool order either way
    let rows: Vec<Vec<f64>> = if params.parallel {
        pool.par_iter().map(score).collect::<Result<_>>()?
    } else {
        pool.iter().map(score).collect::<Result<_>>()?
    };
    let table = ScoreTable::new(pool.iter().map(|c| c.seed_id).collect(), rows)?;
    let truncated = truncated_pool_scores(&table, d_star)?;
    Ok(PoolScores {
        table,
        truncated,
        d_star,
    })
}

/// Index of the extreme score; ties go to the lowest index.
pub fn select(scores: &[f64], criterion: Criterion) -> Result<usize> {
    if scores.is_empty() {
        return Err(Error::InvalidInput("no scores to select from".into()));
    }
    if let Some(bad) = scores.iter().find(|x| x.is_nan()) {
        return Err(Error::InvalidInput(format!("score {bad} is not comparable")));
    }
    let mut best = 0;
    for (i, &s) in scores.iter().enumerate().skip(1) {
        let better = match criterion {
            Criterion::Argmin => s < scores[best],
            Criterion::Argmax => s > scores[best],
        };
        if better {
            best = i;
        }
    }
    Ok(best)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CandidateSummary {
    pub seed_id: u64,
    pub rng_seed: u64,
    pub score: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SelectionReport {
    pub pool: Vec<CandidateSummary>,
    pub chosen: u64,
    pub chosen_index: usize,
    pub criterion: Criterion,
    pub reversed: bool,
    /// Pool of one: nothing was compared.
    pub forced: bool,
    /// Truncation depth, 1-based.
    pub depth: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub trajectory_variation: f64,
    pub final_intra_frame_variance: f64,
    /// Mean pairwise distance between the chosen seed's perturbed
    /// attention samples, averaged over layers up to the depth.
    pub chosen_attention_spread: Option<f64>,
    /// Chosen seed's truncated score under `transfer_prompt_id`.
    pub transfer_score: Option<f64>,
}

/// Wall-clock seconds per stage.
pub type StageTimings = BTreeMap<String, f64>;

#[derive(Clone, Debug)]
pub struct PipelineRun {
    pub selection: SelectionReport,
    pub scores: PoolScores,
    pub rollout: Rollout,
    pub metrics: RunMetrics,
    pub timings: StageTimings,
}

fn timed<T>(timings: &mut StageTimings, stage: &'static str, f: impl FnOnce() -> Result<T>) -> Result<T> {
    let start = Instant::now();
    let out = f().map_err(|e| e.in_stage(stage))?;
    timings.insert(stage.to_string(), start.elapsed().as_secs_f64());
    Ok(out)
}

fn attention_spread(
    candidate: &SeedCandidate,
    denoiser: &ToyDenoiser,
    prompt: &PromptEmbedding,
    params: &ScoringParams,
    d_star: usize,
    stream: Stream,
) -> Result<Option<f64>> {
    if params.k < 2 {
        return Ok(None);
    }
    let z = &candidate.latent;
    let maps = denoiser.attention_probe(z, prompt, z.t)?;
    let mut total = 0.0;
    for (l, map) in maps.iter().take(d_star + 1).enumerate() {
        let ens = params.perturbation.ensemble(map, params.k, stream.split(l as u64))?;
        total += pairwise_attention_distance(ens.samples())?;
    }
    Ok(Some(total / (d_star + 1) as f64))
}

/// Scores the pool, selects a seed and rolls it out.
pub fn run_pipeline(cfg: &RunConfig) -> Result<PipelineRun> {
    cfg.validate()?;
    let mut timings = StageTimings::new();
    let (denoiser, sched) = timed(&mut timings, "setup", || {
        Ok((ToyDenoiser::new(cfg.denoiser_config())?, cfg.schedule()?))
    })?;
    let prompt = PromptEmbedding::synthetic(cfg.prompt_id, cfg.sizes.dim);
    let steps = cfg.sizes.steps;
    let pool = timed(&mut timings, "pool", || {
        build_pool(cfg.m, cfg.base_seed, cfg.sizes.tokens, cfg.sizes.dim, steps)
    })?;
    let params = ScoringParams::from_config(cfg);
    let d_star = cfg.d_star();
    let root = Stream::new(cfg.base_seed);
    let scores = timed(&mut timings, "scoring", || {
        score_pool(&pool, &denoiser, &prompt, &sched, &params, d_star, root.tagged("score"))
    })?;
    let chosen_index = timed(&mut timings, "selection", || select(&scores.truncated, cfg.criterion))?;
    let chosen = &pool[chosen_index];
    let traj = timed(&mut timings, "rollout", || {
        rollout(&denoiser, &chosen.latent, &prompt, &sched, cfg.convention)
    })?;
    let metrics = timed(&mut timings, "analysis", || {
        let record = TrajectoryRecord::from_rollout(chosen.seed_id, &traj)?;
        let transfer_score = match cfg.transfer_prompt_id {
            Some(id) => {
                let other = PromptEmbedding::synthetic(id, cfg.sizes.dim);
                let row = seed_layer_scores(chosen, &denoiser, &other, &sched, &params, root.tagged("transfer"))?;
                Some(row[..=d_star].iter().sum::<f64>() / (d_star + 1) as f64)
            }
            None => None,
        };
        Ok(RunMetrics {
            trajectory_variation: if record.states.len() >= 3 {
                trajectory_variation(&record, cfg.cutoff)?
            } else {
                0.0
            },
            final_intra_frame_variance: intra_frame_variance(traj.last()),
            chosen_attention_spread: attention_spread(
                chosen,
                &denoiser,
                &prompt,
                &params,
                d_star,
                root.tagged("spread").split(chosen.seed_id),
            )?,
            transfer_score,
        })
    })?;
    let selection = SelectionReport {
        pool: pool
            .iter()
            .zip(&scores.truncated)
            .map(|(c, s)| CandidateSummary {
                seed_id: c.seed_id,
                rng_seed: c.rng_seed,
                score: *s,
            })
            .collect(),
        chosen: chosen.seed_id,
        chosen_index,
        criterion: cfg.criterion,
        reversed: cfg.criterion == Criterion::Argmax,
        forced: cfg.m == 1,
        depth: d_star + 1,
    };
    Ok(PipelineRun {
        selection,
        scores,
        rollout: traj,
        metrics,
        timings,
    })
}

/// Offline layer probing over several prompts.
#[derive(Clone, Debug)]
pub struct LayerProbeRun {
    /// One table per prompt, all layers.
    pub tables: Vec<ScoreTable>,
    /// All prompts stacked.
    pub pooled: ScoreTable,
    pub profile: LayerProfile,
}

/// Scores `m` seeds for each of `probe_prompts` prompts at every layer and
/// picks the truncation depth across the stacked pool. Seed ids in the
/// stacked table are `prompt_index * m + seed`.
pub fn probe_layers(cfg: &RunConfig) -> Result<LayerProbeRun> {
    cfg.validate()?;
    let denoiser = ToyDenoiser::new(cfg.denoiser_config())?;
    let sched = cfg.schedule()?;
    let params = ScoringParams::from_config(cfg);
    let root = Stream::new(cfg.base_seed).tagged("probe");
    let tables = (0..cfg.probe_prompts as u64)
        .map(|j| {
            let prompt = PromptEmbedding::synthetic(cfg.prompt_id + j, cfg.sizes.dim);
            let pool_seed = root.split(j).key();
            let pool = build_pool(cfg.m, pool_seed, cfg.sizes.tokens, cfg.sizes.dim, cfg.sizes.steps)?;
            let scores = score_pool(
                &pool,
                &denoiser,
                &prompt,
                &sched,
                &params,
                denoiser.layer_count() - 1,
                root.split(j).tagged("score"),
            )?;
            let ids = (0..cfg.m as u64).map(|i| j * cfg.m as u64 + i).collect();
            ScoreTable::new(ids, scores.table.rows().to_vec())
        })
        .collect::<Result<Vec<_>>>()?;
    let pooled = ScoreTable::concat(&tables)?;
    let profile = select_depth(&pooled, cfg.tau)?;
    Ok(LayerProbeRun {
        tables,
        pooled,
        profile,
    })
}
