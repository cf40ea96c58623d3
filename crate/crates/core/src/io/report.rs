//! JSON report documents.
//!
//! Every document is `{schema_version, command, payload, timings}`. The
//! payload is a pure function of the inputs; wall-clock timings sit beside it
//! so that payload bytes can be compared across runs. Readers ignore fields
//! they do not know and reject documents whose `schema_version` is newer than
//! [`SCHEMA_VERSION`].

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::analysis::GroupDistanceSummary;
use crate::error::{Error, Result};
use crate::io::config::RunConfig;
use crate::layer_probe::{select_depth, LayerProfile, ScoreTable};
use crate::selector::{run_pipeline, LayerProbeRun, PipelineRun, RunMetrics, SelectionReport, StageTimings};

/// Bumped on any change an older reader would misinterpret.
pub const SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportDocument<P> {
    pub schema_version: u32,
    pub command: String,
    pub payload: P,
    #[serde(default)]
    pub timings: StageTimings,
}

impl<P: Serialize + DeserializeOwned> ReportDocument<P> {
    pub fn new(command: &str, payload: P, timings: StageTimings) -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            command: command.to_string(),
            payload,
            timings,
        }
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::Invariant(format!("report serialization: {e}")))
    }

    /// Canonical bytes of the deterministic part of the document.
    pub fn payload_bytes(&self) -> Result<Vec<u8>> {
        serde_json::to_vec_pretty(&self.payload).map_err(|e| Error::Invariant(format!("report serialization: {e}")))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Self::parse(text, Path::new("<report>"))
    }

    fn parse(text: &str, path: &Path) -> Result<Self> {
        let parse_err = |message: String| Error::Parse {
            path: path.to_path_buf(),
            message,
        };
        let value: serde_json::Value = serde_json::from_str(text).map_err(|e| parse_err(e.to_string()))?;
        let version = value
            .get("schema_version")
            .and_then(serde_json::Value::as_u64)
            .ok_or_else(|| parse_err("missing schema_version".into()))?;
        if version > u64::from(SCHEMA_VERSION) {
            return Err(parse_err(format!(
                "schema_version {version} is newer than supported {SCHEMA_VERSION}"
            )));
        }
        serde_json::from_value(value).map_err(|e| parse_err(e.to_string()))
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut text = self.to_json()?;
        text.push('\n');
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, path)
    }
}

/// Tensor files written next to a selection report, by role.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Artifacts {
    pub initial_latent: Option<String>,
    pub final_latent: Option<String>,
    pub trajectory: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SelectPayload {
    pub config: RunConfig,
    /// All layers, one row per pool seed.
    pub score_table: ScoreTable,
    /// Cumulative score at the truncation depth; this is what was ranked.
    pub truncated_scores: Vec<f64>,
    /// Depth profile of this pool. Absent when it is undefined, for example
    /// with one seed or constant scores.
    pub layer_profile: Option<LayerProfile>,
    pub selection: SelectionReport,
    pub metrics: RunMetrics,
    #[serde(default)]
    pub artifacts: Artifacts,
}

impl SelectPayload {
    pub fn from_run(config: &RunConfig, run: &PipelineRun) -> Self {
        let layer_profile = select_depth(&run.scores.table, config.tau).ok();
        Self {
            config: config.clone(),
            score_table: run.scores.table.clone(),
            truncated_scores: run.scores.truncated.clone(),
            layer_profile,
            selection: run.selection.clone(),
            metrics: run.metrics.clone(),
            artifacts: Artifacts::default(),
        }
    }

    /// Re-runs the embedded configuration and checks that the scores and
    /// the selection come out identical.
    pub fn replays(&self) -> Result<bool> {
        let run = run_pipeline(&self.config)?;
        Ok(run.scores.table == self.score_table
            && run.scores.truncated == self.truncated_scores
            && run.selection == self.selection)
    }
}

pub type SelectReport = ReportDocument<SelectPayload>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbePayload {
    pub config: RunConfig,
    pub profile: LayerProfile,
    /// 1-based truncation depth.
    pub depth: usize,
    /// Seeds from every probe prompt, stacked.
    pub score_table: ScoreTable,
}

impl ProbePayload {
    pub fn from_run(config: &RunConfig, run: &LayerProbeRun) -> Self {
        Self {
            config: config.clone(),
            depth: run.profile.d_star_1based(),
            profile: run.profile.clone(),
            score_table: run.pooled.clone(),
        }
    }
}

pub type ProbeReport = ReportDocument<ProbePayload>;

/// Comma-separated profile, one line per depth (1-based). Undefined
/// correlations are left empty.
pub fn profile_table(profile: &LayerProfile) -> String {
    let mut out = String::from("depth,correlation,per_layer_mean,cumulative_mean\n");
    for (d, corr) in profile.corr_curve.iter().enumerate() {
        let corr = corr.map(|c| c.to_string()).unwrap_or_default();
        // Writing to a String cannot fail.
        let _ = writeln!(
            out,
            "{},{},{},{}",
            d + 1,
            corr,
            profile.per_layer[d],
            profile.cumulative[d]
        );
    }
    out
}

/// Single-map BANSA-E record printed by the `score` command.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScorePayload {
    pub attention_file: PathBuf,
    pub rows: usize,
    pub cols: usize,
    pub k: usize,
    pub p: f64,
    pub seed: u64,
    pub score: f64,
}

pub type ScoreReport = ReportDocument<ScorePayload>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryMetrics {
    pub file: PathBuf,
    pub steps: usize,
    pub variation: f64,
    pub final_intra_frame_variance: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnalyzePayload {
    pub cutoff: f64,
    pub trajectories: Vec<TrajectoryMetrics>,
    /// Mean over steps of the mean pairwise distance between trajectories.
    pub trajectory_distance: Option<f64>,
    pub attention_groups: Option<GroupDistanceSummary>,
}

pub type AnalyzeReport = ReportDocument<AnalyzePayload>;

#[cfg(test)]
mod tests {
    use super::*;

    fn profile() -> LayerProfile {
        LayerProfile {
            per_layer: vec![0.5, 0.25],
            cumulative: vec![0.5, 0.375],
            corr_curve: vec![None, Some(1.0)],
            d_star: 1,
            tau: 0.7,
        }
    }

    fn doc() -> ReportDocument<LayerProfile> {
        let mut t = StageTimings::new();
        t.insert("scoring".into(), 0.5);
        ReportDocument::new("probe-layers", profile(), t)
    }

    #[test]
    fn round_trips_through_json() {
        let d = doc();
        let back = ReportDocument::<LayerProfile>::from_json(&d.to_json().unwrap()).unwrap();
        assert_eq!(back, d);
    }

    #[test]
    fn payload_bytes_ignore_timings() {
        let a = doc();
        let mut b = doc();
        b.timings.insert("scoring".into(), 9.0);
        assert_eq!(a.payload_bytes().unwrap(), b.payload_bytes().unwrap());
        assert_ne!(a.to_json().unwrap(), b.to_json().unwrap());
    }

    #[test]
    fn unknown_fields_are_ignored() {
        let mut v: serde_json::Value = serde_json::from_str(&doc().to_json().unwrap()).unwrap();
        v["extra"] = serde_json::json!({"anything": [1, 2]});
        v["payload"]["added_later"] = serde_json::json!(true);
        let back = ReportDocument::<LayerProfile>::from_json(&v.to_string()).unwrap();
        assert_eq!(back.payload, profile());
    }

    #[test]
    fn newer_schema_is_rejected() {
        let mut v: serde_json::Value = serde_json::from_str(&doc().to_json().unwrap()).unwrap();
        v["schema_version"] = serde_json::json!(SCHEMA_VERSION + 1);
        assert!(matches!(
            ReportDocument::<LayerProfile>::from_json(&v.to_string()),
            Err(Error::Parse { .. })
        ));
        v.as_object_mut().unwrap().remove("schema_version");
        assert!(ReportDocument::<LayerProfile>::from_json(&v.to_string()).is_err());
    }

    #[test]
    fn profile_table_has_one_line_per_depth() {
        let t = profile_table(&profile());
        let lines: Vec<&str> = t.lines().collect();
        assert_eq!(lines.len(), 3);
        assert_eq!(lines[1], "1,,0.5,0.5");
        assert_eq!(lines[2], "2,1,0.25,0.375");
    }

    #[test]
    fn select_payload_replays() {
        let cfg = RunConfig {
            m: 3,
            sizes: crate::io::config::Sizes {
                steps: 8,
                ..Default::default()
            },
            ..RunConfig::default()
        };
        let run = run_pipeline(&cfg).unwrap();
        let payload = SelectPayload::from_run(&cfg, &run);
        let doc = SelectReport::new("select", payload, run.timings.clone());
        let back = SelectReport::from_json(&doc.to_json().unwrap()).unwrap();
        assert_eq!(back.payload, doc.payload);
        assert!(back.payload.replays().unwrap());
    }
}
