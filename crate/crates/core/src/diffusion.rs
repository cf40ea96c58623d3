//! Deterministic toy latent diffusion.
//!
//! Latents are `N x d` token matrices. The denoiser is a fixed random
//! attention stack whose weights are drawn from a model seed; it only has
//! to produce input-dependent attention maps and a noise prediction that
//! keeps DDIM rollouts finite.

use ndarray::{Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::attention::{attention_from_qk, default_scale, AttentionMap, TokenMatrix};
use crate::error::{Error, Result};
use crate::rng::Stream;

/// Cumulative signal fractions `ᾱ_t` for `t = 1..=T`; `ᾱ_0 = 1`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    alphas_bar: Vec<f64>,
}

impl NoiseSchedule {
    pub fn new(alphas_bar: Vec<f64>) -> Result<Self> {
        if alphas_bar.is_empty() {
            return Err(Error::InvalidInput("schedule needs at least one step".into()));
        }
        if alphas_bar.iter().any(|a| !(*a > 0.0 && *a <= 1.0)) {
            return Err(Error::InvalidInput("alpha_bar values must lie in (0, 1]".into()));
        }
        if alphas_bar.windows(2).any(|w| w[1] >= w[0]) {
            return Err(Error::InvalidInput("alpha_bar must be strictly decreasing".into()));
        }
        Ok(Self { alphas_bar })
    }

    /// `ᾱ` linear from `start` at `t = 1` to `end` at `t = T`.
    pub fn linear(steps: usize, start: f64, end: f64) -> Result<Self> {
        if steps == 1 {
            return Self::new(vec![start]);
        }
        let span = (steps - 1) as f64;
        Self::new((0..steps).map(|i| start + (end - start) * i as f64 / span).collect())
    }

    pub fn steps(&self) -> usize {
        self.alphas_bar.len()
    }

    pub fn alphas_bar(&self) -> &[f64] {
        &self.alphas_bar
    }

    /// `ᾱ_t`, with `ᾱ_0 = 1`.
    pub fn alpha_bar(&self, t: usize) -> Result<f64> {
        match t {
            0 => Ok(1.0),
            t if t <= self.steps() => Ok(self.alphas_bar[t - 1]),
            t => Err(Error::InvalidInput(format!(
                "timestep {t} outside 0..={}",
                self.steps()
            ))),
        }
    }
}

impl Default for NoiseSchedule {
    fn default() -> Self {
        Self::linear(50, 0.9999, 0.02).expect("default schedule is valid")
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LatentState {
    pub data: Array2<f64>,
    pub t: usize,
}

impl LatentState {
    pub fn new(data: Array2<f64>, t: usize) -> Result<Self> {
        if data.iter().any(|x| !x.is_finite()) {
            return Err(Error::InvalidInput("latent has non-finite entries".into()));
        }
        Ok(Self { data, t })
    }

    /// Standard normal latent drawn from `stream`.
    pub fn gaussian(tokens: usize, dim: usize, t: usize, stream: Stream) -> Self {
        Self {
            data: gaussian_noise(tokens, dim, stream),
            t,
        }
    }

    pub fn tokens(&self) -> usize {
        self.data.nrows()
    }

    pub fn dim(&self) -> usize {
        self.data.ncols()
    }
}

pub fn gaussian_noise(tokens: usize, dim: usize, stream: Stream) -> Array2<f64> {
    Array2::from_shape_vec((tokens, dim), stream.normals(tokens * dim)).expect("shape matches draw count")
}

/// `√ᾱ_t z0 + √(1−ᾱ_t) ε`, with `ε = gaussian_noise(.., stream)`.
pub fn forward_noise(z0: &LatentState, t: usize, sched: &NoiseSchedule, stream: Stream) -> Result<LatentState> {
    if t == 0 || t > sched.steps() {
        return Err(Error::InvalidInput(format!(
            "forward noising needs 1 <= t <= {}, got {t}",
            sched.steps()
        )));
    }
    let a = sched.alpha_bar(t)?;
    let eps = gaussian_noise(z0.tokens(), z0.dim(), stream);
    Ok(LatentState {
        data: &z0.data * a.sqrt() + &eps * (1.0 - a).sqrt(),
        t,
    })
}

fn check_eps(z: &LatentState, eps: &Array2<f64>) -> Result<()> {
    if z.data.dim() != eps.dim() {
        return Err(Error::Shape(format!(
            "latent {:?} vs noise prediction {:?}",
            z.data.dim(),
            eps.dim()
        )));
    }
    Ok(())
}

/// `ẑ_0 = (z_t − √(1−ᾱ_t) ε̂) / √ᾱ_t`.
pub fn tweedie_estimate(
    z_t: &LatentState,
    eps_hat: &Array2<f64>,
    t: usize,
    sched: &NoiseSchedule,
) -> Result<Array2<f64>> {
    check_eps(z_t, eps_hat)?;
    let a = sched.alpha_bar(t)?;
    tweedie_with(z_t, eps_hat, a)
}

fn tweedie_with(z_t: &LatentState, eps_hat: &Array2<f64>, alpha_bar: f64) -> Result<Array2<f64>> {
    if alpha_bar <= 0.0 {
        return Err(Error::InvalidInput(format!("alpha_bar {alpha_bar} <= 0")));
    }
    Ok((&z_t.data - &(eps_hat * (1.0 - alpha_bar).sqrt())) / alpha_bar.sqrt())
}

/// Coefficient on `ẑ_0` in the deterministic update.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DdimConvention {
    /// `z_{t−1} = √ᾱ_t ẑ_0 + √(1−ᾱ_{t−1}) ε̂`
    #[default]
    CurrentAlpha,
    /// `z_{t−1} = √ᾱ_{t−1} ẑ_0 + √(1−ᾱ_{t−1}) ε̂`, the textbook form
    PreviousAlpha,
}

pub fn ddim_step(
    z_t: &LatentState,
    eps_hat: &Array2<f64>,
    t: usize,
    sched: &NoiseSchedule,
    convention: DdimConvention,
) -> Result<LatentState> {
    if t == 0 || t > sched.steps() {
        return Err(Error::InvalidInput(format!(
            "DDIM step needs 1 <= t <= {}, got {t}",
            sched.steps()
        )));
    }
    check_eps(z_t, eps_hat)?;
    let a_t = sched.alpha_bar(t)?;
    let a_prev = sched.alpha_bar(t - 1)?;
    let z0 = tweedie_with(z_t, eps_hat, a_t)?;
    let signal = match convention {
        DdimConvention::CurrentAlpha => a_t.sqrt(),
        DdimConvention::PreviousAlpha => a_prev.sqrt(),
    };
    LatentState::new(z0 * signal + eps_hat * (1.0 - a_prev).sqrt(), t - 1)
}

/// Synthetic conditioning vector.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PromptEmbedding {
    pub prompt_id: u64,
    pub vector: Vec<f64>,
}

impl PromptEmbedding {
    /// Standard normal embedding keyed by `prompt_id`.
    pub fn synthetic(prompt_id: u64, dim: usize) -> Self {
        Self {
            prompt_id,
            vector: Stream::new(prompt_id).tagged("prompt").normals(dim),
        }
    }

    pub fn zeros(dim: usize) -> Self {
        Self {
            prompt_id: 0,
            vector: vec![0.0; dim],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DenoiserConfig {
    pub tokens: usize,
    pub dim: usize,
    pub layers: usize,
    pub model_seed: u64,
    /// Weight share of the component common to all layers, in [0, 1].
    /// 1 makes every layer identical.
    pub layer_coherence: f64,
    /// Standard deviation of q/k projection entries, times `√d`.
    pub qk_gain: f64,
    pub prompt_strength: f64,
    /// Extra weight on the token-mean (lowest-frequency) latent component.
    pub lowfreq_gain: f64,
    /// Hidden states are scaled by `mean(z²)^energy_exponent`, so a
    /// seed's attention temperature follows its energy in every layer.
    pub energy_exponent: f64,
    /// Leading layers with near-uniform attention and no energy coupling.
    pub shallow_layers: usize,
    /// q/k gain of the shallow layers.
    pub shallow_qk_gain: f64,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self {
            tokens: 16,
            dim: 8,
            layers: 8,
            model_seed: 0,
            layer_coherence: 0.6,
            qk_gain: 1.3,
            prompt_strength: 0.8,
            lowfreq_gain: 0.0,
            energy_exponent: 4.0,
            shallow_layers: 3,
            shallow_qk_gain: 0.3,
        }
    }
}

impl DenoiserConfig {
    pub fn validate(&self) -> Vec<String> {
        let mut errs = Vec::new();
        for (name, v) in [("tokens", self.tokens), ("dim", self.dim), ("layers", self.layers)] {
            if v == 0 {
                errs.push(format!("{name} must be >= 1"));
            }
        }
        if !(0.0..=1.0).contains(&self.layer_coherence) {
            errs.push(format!("layer_coherence {} outside [0, 1]", self.layer_coherence));
        }
        if !(self.qk_gain.is_finite() && self.qk_gain >= 0.0) {
            errs.push(format!("qk_gain {} must be finite and >= 0", self.qk_gain));
        }
        if !self.prompt_strength.is_finite() {
            errs.push("prompt_strength must be finite".into());
        }
        if !self.lowfreq_gain.is_finite() {
            errs.push("lowfreq_gain must be finite".into());
        }
        if !self.energy_exponent.is_finite() {
            errs.push("energy_exponent must be finite".into());
        }
        if self.shallow_layers > self.layers {
            errs.push(format!(
                "shallow_layers {} exceeds layers {}",
                self.shallow_layers, self.layers
            ));
        }
        if !(self.shallow_qk_gain.is_finite() && self.shallow_qk_gain >= 0.0) {
            errs.push(format!(
                "shallow_qk_gain {} must be finite and >= 0",
                self.shallow_qk_gain
            ));
        }
        errs
    }
}

#[derive(Clone, Debug)]
struct LayerWeights {
    wq: Array2<f64>,
    wk: Array2<f64>,
    wv: Array2<f64>,
    energy_exponent: f64,
}

/// Fixed-weight stand-in for a noise-prediction network.
#[derive(Clone, Debug)]
pub struct ToyDenoiser {
    config: DenoiserConfig,
    layers: Vec<LayerWeights>,
    prompt_proj: Array2<f64>,
    token_gain: Vec<f64>,
    out_proj: Array2<f64>,
}

fn gaussian_matrix(dim: usize, sd: f64, stream: Stream) -> Array2<f64> {
    gaussian_noise(dim, dim, stream) * sd
}

impl ToyDenoiser {
    pub fn new(config: DenoiserConfig) -> Result<Self> {
        let errs = config.validate();
        if !errs.is_empty() {
            return Err(Error::Config(errs));
        }
        let d = config.dim;
        let root = Stream::new(config.model_seed).tagged("denoiser");
        let shared = root.tagged("shared");
        let c = config.layer_coherence;
        let own = (1.0 - c * c).sqrt();
        let mix = |role: &str, l: u64, gain: f64| {
            let sd = gain / (d as f64).sqrt();
            let common = gaussian_matrix(d, sd, shared.tagged(role));
            if own == 0.0 {
                return common;
            }
            common * c + gaussian_matrix(d, sd, root.tagged(role).split(l)) * own
        };
        let layers = (0..config.layers as u64)
            .map(|l| {
                let shallow = (l as usize) < config.shallow_layers;
                let gain = if shallow {
                    config.shallow_qk_gain
                } else {
                    config.qk_gain
                };
                LayerWeights {
                    wq: mix("q", l, gain),
                    wk: mix("k", l, gain),
                    wv: gaussian_matrix(d, 1.0 / (d as f64).sqrt(), root.tagged("v").split(l)),
                    energy_exponent: if shallow { 0.0 } else { config.energy_exponent },
                }
            })
            .collect();
        let prompt_proj = gaussian_matrix(d, 1.0 / (d as f64).sqrt(), root.tagged("prompt"));
        let token_gain = root
            .tagged("token_gain")
            .normals(config.tokens)
            .into_iter()
            .map(|g| config.prompt_strength * (1.0 + 0.5 * g.tanh()))
            .collect();
        let out_proj = gaussian_matrix(d, 0.5 / (d as f64).sqrt(), root.tagged("out"));
        Ok(Self {
            config,
            layers,
            prompt_proj,
            token_gain,
            out_proj,
        })
    }

    pub fn config(&self) -> &DenoiserConfig {
        &self.config
    }

    pub fn layer_count(&self) -> usize {
        self.layers.len()
    }

    fn check(&self, z: &LatentState, prompt: &PromptEmbedding) -> Result<()> {
        let (n, d) = (self.config.tokens, self.config.dim);
        if z.data.dim() != (n, d) {
            return Err(Error::Shape(format!(
                "latent {:?}, denoiser expects ({n}, {d})",
                z.data.dim()
            )));
        }
        if prompt.vector.len() != d {
            return Err(Error::Shape(format!(
                "prompt width {}, denoiser expects {d}",
                prompt.vector.len()
            )));
        }
        Ok(())
    }

    /// Latent with its token mean amplified, plus per-token prompt
    /// coupling, modulated by the timestep. Also returns the latent's mean
    /// energy.
    fn hidden(&self, z: &LatentState, prompt: &PromptEmbedding, t: usize) -> (Array2<f64>, f64) {
        let c = ndarray::ArrayView1::from(&prompt.vector[..]);
        let coupling = c.dot(&self.prompt_proj);
        let token_mean = z.data.mean_axis(Axis(0)).expect("latents have tokens");
        let mut h = z.data.clone();
        for (mut row, g) in h.axis_iter_mut(Axis(0)).zip(&self.token_gain) {
            row.scaled_add(*g, &coupling);
            row.scaled_add(self.config.lowfreq_gain, &token_mean);
        }
        let energy = z.data.mapv(|x| x * x).mean().expect("latents are non-empty");
        (h * (1.0 + 0.5 / (1.0 + t as f64 / 10.0)), energy)
    }

    /// Layer `l` sees the hidden state scaled by `energy^exponent_l`.
    fn maps_for(&self, h: &Array2<f64>, energy: f64) -> Result<Vec<AttentionMap>> {
        let scale = default_scale(self.config.dim);
        self.layers
            .iter()
            .map(|w| {
                let gain = if energy > 0.0 {
                    energy.powf(w.energy_exponent)
                } else {
                    1.0
                };
                let q = TokenMatrix::new(h.dot(&w.wq) * gain)?;
                let k = TokenMatrix::new(h.dot(&w.wk) * gain)?;
                attention_from_qk(&q, &k, scale)
            })
            .collect()
    }

    /// One attention map per layer.
    pub fn attention_probe(&self, z_t: &LatentState, prompt: &PromptEmbedding, t: usize) -> Result<Vec<AttentionMap>> {
        self.check(z_t, prompt)?;
        let (h, energy) = self.hidden(z_t, prompt, t);
        self.maps_for(&h, energy)
    }

    /// Noise prediction: a linear read-out of the layer-averaged
    /// attention-mixed values plus a multiple of the latent.
    pub fn predict_noise(&self, z_t: &LatentState, prompt: &PromptEmbedding, t: usize) -> Result<Array2<f64>> {
        self.check(z_t, prompt)?;
        let (h, energy) = self.hidden(z_t, prompt, t);
        let maps = self.maps_for(&h, energy)?;
        let mut mixed = Array2::<f64>::zeros(h.dim());
        for (a, w) in maps.iter().zip(&self.layers) {
            mixed += &a.view().dot(&h.dot(&w.wv));
        }
        mixed /= self.layers.len() as f64;
        Ok(&z_t.data * 0.8 + &mixed.dot(&self.out_proj))
    }
}

/// Denoising trajectory, ordered by decreasing `t`.
#[derive(Clone, Debug, PartialEq)]
pub struct Rollout {
    pub states: Vec<LatentState>,
}

impl Rollout {
    pub fn last(&self) -> &LatentState {
        self.states.last().expect("rollouts hold at least the start state")
    }
}

/// DDIM from `z_start.t` down to `stop_t`.
pub fn rollout_until(
    denoiser: &ToyDenoiser,
    z_start: &LatentState,
    prompt: &PromptEmbedding,
    sched: &NoiseSchedule,
    convention: DdimConvention,
    stop_t: usize,
) -> Result<Rollout> {
    if z_start.t > sched.steps() || stop_t > z_start.t {
        return Err(Error::InvalidInput(format!(
            "cannot roll out from t = {} to t = {stop_t} with {} steps",
            z_start.t,
            sched.steps()
        )));
    }
    let mut states = Vec::with_capacity(z_start.t - stop_t + 1);
    states.push(z_start.clone());
    for t in (stop_t + 1..=z_start.t).rev() {
        let z = states.last().expect("non-empty");
        let eps = denoiser.predict_noise(z, prompt, t)?;
        let next = ddim_step(z, &eps, t, sched, convention)?;
        states.push(next);
    }
    Ok(Rollout { states })
}

/// Full rollout to `t = 0`.
pub fn rollout(
    denoiser: &ToyDenoiser,
    z_start: &LatentState,
    prompt: &PromptEmbedding,
    sched: &NoiseSchedule,
    convention: DdimConvention,
) -> Result<Rollout> {
    rollout_until(denoiser, z_start, prompt, sched, convention, 0)
}
