//! Run configuration.
//!
//! Read from TOML; every field has a default, so an empty file is a valid
//! configuration. Validation reports all violated fields at once.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::diffusion::{DdimConvention, DenoiserConfig, NoiseSchedule};
use crate::error::{Error, Result};
use crate::layer_probe::DEFAULT_TAU;
use crate::masking::Perturbation;
use crate::selector::{Acquisition, Criterion};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Sizes {
    pub tokens: usize,
    pub dim: usize,
    pub layers: usize,
    pub steps: usize,
}

impl Default for Sizes {
    fn default() -> Self {
        Self {
            tokens: 16,
            dim: 8,
            layers: 8,
            steps: 50,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelParams {
    pub layer_coherence: f64,
    pub qk_gain: f64,
    pub prompt_strength: f64,
    pub lowfreq_gain: f64,
    pub energy_exponent: f64,
    pub shallow_layers: usize,
    pub shallow_qk_gain: f64,
}

impl Default for ModelParams {
    fn default() -> Self {
        let d = DenoiserConfig::default();
        Self {
            layer_coherence: d.layer_coherence,
            qk_gain: d.qk_gain,
            prompt_strength: d.prompt_strength,
            lowfreq_gain: d.lowfreq_gain,
            energy_exponent: d.energy_exponent,
            shallow_layers: d.shallow_layers,
            shallow_qk_gain: d.shallow_qk_gain,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleParams {
    pub alpha_start: f64,
    pub alpha_end: f64,
}

impl Default for ScheduleParams {
    fn default() -> Self {
        Self {
            alpha_start: 0.9999,
            alpha_end: 0.02,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Noise pool size.
    pub m: usize,
    /// Stochastic samples per attention map.
    pub k: usize,
    /// Mask drop probability.
    pub p: f64,
    /// Correlation threshold for layer truncation.
    pub tau: f64,
    /// Timestep at which attention is probed; defaults to the first
    /// denoising step (`steps`).
    pub probe_timestep: Option<usize>,
    /// Number of consecutive timesteps, starting at `probe_timestep`,
    /// whose scores are averaged.
    pub probe_window: usize,
    /// Truncation depth, 1-based. Defaults to all layers.
    pub depth: Option<usize>,
    pub model_seed: u64,
    pub base_seed: u64,
    pub prompt_id: u64,
    /// Also score the chosen seed under this prompt.
    pub transfer_prompt_id: Option<u64>,
    pub criterion: Criterion,
    pub acquisition: Acquisition,
    /// Logit noise scale for the jitter acquisition.
    pub jitter_sigma: f64,
    pub convention: DdimConvention,
    /// Score seeds on the rayon pool.
    pub parallel: bool,
    /// Low-pass cutoff for trajectory variation, cycles per step.
    pub cutoff: f64,
    /// Prompts used by `probe-layers` (ids `prompt_id..prompt_id + n`).
    pub probe_prompts: usize,
    pub sizes: Sizes,
    pub model: ModelParams,
    pub schedule: ScheduleParams,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            m: 10,
            k: 10,
            p: 0.2,
            tau: DEFAULT_TAU,
            probe_timestep: None,
            probe_window: 1,
            depth: None,
            model_seed: 0,
            base_seed: 0,
            prompt_id: 0,
            transfer_prompt_id: None,
            criterion: Criterion::Argmin,
            acquisition: Acquisition::BansaE,
            jitter_sigma: 0.3,
            convention: DdimConvention::CurrentAlpha,
            parallel: true,
            cutoff: crate::analysis::DEFAULT_CUTOFF,
            probe_prompts: 100,
            sizes: Sizes::default(),
            model: ModelParams::default(),
            schedule: ScheduleParams::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Parse {
            path: "<config>".into(),
            message: e.to_string(),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text).map_err(|e| match e {
            Error::Parse { message, .. } => Error::Parse {
                path: path.into(),
                message,
            },
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn violations(&self) -> Vec<String> {
        let mut errs = Vec::new();
        let mut need = |ok: bool, msg: String| {
            if !ok {
                errs.push(msg);
            }
        };
        need(self.m >= 1, format!("m = {}: pool size must be >= 1", self.m));
        need(self.k >= 1, format!("k = {}: ensemble size must be >= 1", self.k));
        need(
            (0.0..=1.0).contains(&self.p),
            format!("p = {}: must lie in [0, 1]", self.p),
        );
        need(
            (-1.0..=1.0).contains(&self.tau),
            format!("tau = {}: must lie in [-1, 1]", self.tau),
        );
        let s = &self.sizes;
        need(s.tokens >= 1, "sizes.tokens must be >= 1".into());
        need(s.dim >= 1, "sizes.dim must be >= 1".into());
        need(s.layers >= 1, "sizes.layers must be >= 1".into());
        need(s.steps >= 1, "sizes.steps must be >= 1".into());
        let t = self.probe_t();
        need(
            (1..=s.steps).contains(&t),
            format!("probe_timestep = {t}: must lie in 1..={}", s.steps),
        );
        need(
            self.probe_window >= 1 && self.probe_window <= t,
            format!("probe_window = {}: must lie in 1..={t}", self.probe_window),
        );
        if let Some(depth) = self.depth {
            need(
                (1..=s.layers).contains(&depth),
                format!("depth = {depth}: must lie in 1..={}", s.layers),
            );
        }
        need(
            self.jitter_sigma.is_finite() && self.jitter_sigma >= 0.0,
            format!("jitter_sigma = {}: must be finite and >= 0", self.jitter_sigma),
        );
        need(
            self.cutoff > 0.0 && self.cutoff < 0.5,
            format!("cutoff = {}: must lie in (0, 0.5)", self.cutoff),
        );
        need(self.probe_prompts >= 1, "probe_prompts must be >= 1".into());
        let sch = &self.schedule;
        need(
            sch.alpha_start > 0.0 && sch.alpha_start <= 1.0,
            format!("schedule.alpha_start = {}: must lie in (0, 1]", sch.alpha_start),
        );
        need(
            sch.alpha_end > 0.0 && (sch.alpha_end < sch.alpha_start || s.steps == 1),
            format!("schedule.alpha_end = {}: must lie in (0, alpha_start)", sch.alpha_end),
        );
        for e in self.denoiser_config().validate() {
            if !e.contains("tokens") && !e.contains("dim") && !e.contains("layers") {
                errs.push(format!("model.{e}"));
            }
        }
        errs
    }

    pub fn validate(&self) -> Result<()> {
        let errs = self.violations();
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(errs))
        }
    }

    pub fn probe_t(&self) -> usize {
        self.probe_timestep.unwrap_or(self.sizes.steps)
    }

    /// Probe timesteps, latest first.
    pub fn probe_timesteps(&self) -> Vec<usize> {
        let t = self.probe_t();
        (0..self.probe_window).map(|i| t - i).collect()
    }

    /// 0-based truncation depth.
    pub fn d_star(&self) -> usize {
        self.depth.unwrap_or(self.sizes.layers) - 1
    }

    pub fn denoiser_config(&self) -> DenoiserConfig {
        DenoiserConfig {
            tokens: self.sizes.tokens,
            dim: self.sizes.dim,
            layers: self.sizes.layers,
            model_seed: self.model_seed,
            layer_coherence: self.model.layer_coherence,
            qk_gain: self.model.qk_gain,
            prompt_strength: self.model.prompt_strength,
            lowfreq_gain: self.model.lowfreq_gain,
            energy_exponent: self.model.energy_exponent,
            shallow_layers: self.model.shallow_layers,
            shallow_qk_gain: self.model.shallow_qk_gain,
        }
    }

    pub fn schedule(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::linear(self.sizes.steps, self.schedule.alpha_start, self.schedule.alpha_end)
    }

    pub fn perturbation(&self) -> Perturbation {
        match self.acquisition {
            Acquisition::Jitter => Perturbation::LogitJitter {
                sigma: self.jitter_sigma,
            },
            _ => Perturbation::Mask { drop_prob: self.p },
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_match_published_setting() {
        let c = RunConfig::from_toml_str("").unwrap();
        assert_eq!(c.m, 10);
        assert_eq!(c.k, 10);
        assert_eq!(c.p, 0.2);
        assert_eq!(c.tau, 0.7);
        assert_eq!(c.sizes.steps, 50);
        assert_eq!(c.probe_t(), 50);
        assert_eq!(c.d_star(), 7);
        assert_eq!(c.criterion, Criterion::Argmin);
        assert_eq!(c, RunConfig::default());
    }

    #[test]
    fn overrides_and_round_trip() {
        let c = RunConfig::from_toml_str(
            "m = 3\ncriterion = \"argmax\"\ndepth = 2\n[sizes]\nlayers = 4\n[model]\nlayer_coherence = 1.0\n",
        )
        .unwrap();
        assert_eq!(c.m, 3);
        assert_eq!(c.criterion, Criterion::Argmax);
        assert_eq!(c.d_star(), 1);
        assert_eq!(c.sizes.tokens, 16);
        assert_eq!(RunConfig::from_toml_str(&c.to_toml()).unwrap(), c);
    }

    #[test]
    fn validation_lists_every_field() {
        let err = RunConfig::from_toml_str(
            "m = 0\nk = 0\np = 1.5\ntau = 2.0\ndepth = 9\ncutoff = 0.7\nprobe_timestep = 60\n",
        )
        .unwrap_err();
        let Error::Config(errs) = err else {
            panic!("expected config error")
        };
        let text = errs.join("\n");
        for field in [
            "m = 0",
            "k = 0",
            "p = 1.5",
            "tau = 2",
            "depth = 9",
            "cutoff = 0.7",
            "probe_timestep = 60",
        ] {
            assert!(text.contains(field), "missing {field} in\n{text}");
        }
        assert!(errs.len() >= 7);
    }

    #[test]
    fn unknown_fields_rejected() {
        assert!(matches!(RunConfig::from_toml_str("mm = 3"), Err(Error::Parse { .. })));
    }

    #[test]
    fn probe_window() {
        let c = RunConfig::from_toml_str("probe_window = 3").unwrap();
        assert_eq!(c.probe_timesteps(), vec![50, 49, 48]);
        assert!(RunConfig::from_toml_str("probe_timestep = 2\nprobe_window = 3").is_err());
    }
}
