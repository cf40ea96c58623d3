use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use log::{info, warn};

use seedsift::acquisition::bansa_e;
use seedsift::analysis::{
    group_summary, intra_frame_variance, pairwise_distance, trajectory_variation, TrajectoryRecord, DEFAULT_CUTOFF,
};
use seedsift::attention::AttentionMap;
use seedsift::diffusion::LatentState;
use seedsift::io::config::RunConfig;
use seedsift::io::report::{
    profile_table, AnalyzePayload, AnalyzeReport, Artifacts, ProbePayload, ProbeReport, ReportDocument, ScorePayload,
    ScoreReport, SelectPayload, SelectReport, TrajectoryMetrics,
};
use seedsift::io::tensor::{read_tensor, write_tensor, Tensor};
use seedsift::rng::Stream;
use seedsift::selector::{probe_layers, run_pipeline, StageTimings};
use seedsift::{oracle, Error, Result};

/// Environment variable holding the log filter, e.g. `info` or `debug`.
const VERBOSITY_VAR: &str = "SEEDSIFT_LOG";

#[derive(Parser)]
#[command(
    name = "seedsift",
    version,
    about = "Score and select diffusion noise seeds by attention uncertainty"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// BANSA-E of a single attention map stored as a rank-2 tensor file.
    Score {
        #[arg(long)]
        attention_file: PathBuf,
        #[arg(long, default_value_t = 10)]
        k: usize,
        #[arg(long, default_value_t = 0.2)]
        p: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Score a seed pool, pick one and roll it out.
    Select {
        config: PathBuf,
        #[arg(long, default_value = "seedsift-out")]
        out: PathBuf,
    },
    /// Per-layer scores over many prompts and the truncation depth.
    ProbeLayers {
        config: PathBuf,
        #[arg(long, default_value = "seedsift-out")]
        out: PathBuf,
    },
    /// Distances, smoothness and spread of saved trajectories and map groups.
    Analyze {
        /// Rank-3 tensors (steps x tokens x dim).
        #[arg(long = "trajectory")]
        trajectories: Vec<PathBuf>,
        /// Rank-3 stack of attention maps for the low-uncertainty group.
        #[arg(long, requires = "high_maps")]
        low_maps: Option<PathBuf>,
        #[arg(long, requires = "low_maps")]
        high_maps: Option<PathBuf>,
        #[arg(long, default_value_t = DEFAULT_CUTOFF)]
        cutoff: f64,
        /// Write the report here instead of standard output.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Cross-check library routines against brute-force references.
    Oracle {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or(VERBOSITY_VAR, "warn")).init();
    // Clap exits with 2 on bad usage; here 2 means I/O, so map usage errors to 1.
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Score {
            attention_file,
            k,
            p,
            seed,
        } => score(&attention_file, k, p, seed),
        Command::Select { config, out } => select(&config, &out),
        Command::ProbeLayers { config, out } => probe(&config, &out),
        Command::Analyze {
            trajectories,
            low_maps,
            high_maps,
            cutoff,
            out,
        } => analyze(&trajectories, low_maps.zip(high_maps), cutoff, out.as_deref()),
        Command::Oracle { seed } => run_oracle(seed),
    }
}

fn score(path: &Path, k: usize, p: f64, seed: u64) -> Result<()> {
    let map = AttentionMap::new(read_tensor(path)?.to_matrix()?)?;
    let (rows, cols) = map.dim();
    let value = bansa_e(&map, k, p, Stream::new(seed))?.value;
    let doc = ScoreReport::new(
        "score",
        ScorePayload {
            attention_file: path.to_path_buf(),
            rows,
            cols,
            k,
            p,
            seed,
            score: value,
        },
        StageTimings::new(),
    );
    println!(
        "{}",
        serde_json::to_string(&doc).map_err(|e| Error::Invariant(e.to_string()))?
    );
    Ok(())
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::Io {
        path: dir.to_path_buf(),
        source: e,
    })
}

fn select(config: &Path, out: &Path) -> Result<()> {
    let cfg = RunConfig::load(config)?;
    let run = run_pipeline(&cfg)?;
    if run.selection.reversed {
        warn!("reversed criterion: the highest-uncertainty seed was selected");
    }
    if run.selection.forced {
        warn!("pool of one seed: selection was forced");
    }
    for (stage, secs) in &run.timings {
        info!("stage {stage}: {secs:.4}s");
    }

    // All files are written here, after the pipeline has finished.
    create_dir(out)?;
    let states: Vec<_> = run.rollout.states.iter().map(|s| s.data.clone()).collect();
    let artifacts = Artifacts {
        initial_latent: Some("initial_latent.atns".into()),
        final_latent: Some("final_latent.atns".into()),
        trajectory: Some("trajectory.atns".into()),
    };
    write_tensor(out.join("initial_latent.atns"), &Tensor::from_matrix(&states[0]))?;
    write_tensor(
        out.join("final_latent.atns"),
        &Tensor::from_matrix(&run.rollout.last().data),
    )?;
    write_tensor(out.join("trajectory.atns"), &Tensor::stack(&states)?)?;

    let mut payload = SelectPayload::from_run(&cfg, &run);
    payload.artifacts = artifacts;
    let report_path = out.join("report.json");
    SelectReport::new("select", payload, run.timings).write(&report_path)?;
    println!("{}", report_path.display());
    Ok(())
}

fn probe(config: &Path, out: &Path) -> Result<()> {
    let cfg = RunConfig::load(config)?;
    let start = std::time::Instant::now();
    let run = probe_layers(&cfg)?;
    let mut timings = StageTimings::new();
    timings.insert("probe".into(), start.elapsed().as_secs_f64());
    info!(
        "truncation depth {} of {}",
        run.profile.d_star_1based(),
        cfg.sizes.layers
    );

    create_dir(out)?;
    let report_path = out.join("probe.json");
    let table_path = out.join("profile.csv");
    ProbeReport::new("probe-layers", ProbePayload::from_run(&cfg, &run), timings).write(&report_path)?;
    std::fs::write(&table_path, profile_table(&run.profile)).map_err(|e| Error::Io {
        path: table_path.clone(),
        source: e,
    })?;
    println!("{}", report_path.display());
    println!("{}", table_path.display());
    Ok(())
}

fn load_trajectory(path: &Path, seed_id: u64) -> Result<TrajectoryRecord> {
    let states = read_tensor(path)?.to_matrices()?;
    TrajectoryRecord::new(seed_id, states)
}

fn analyze(paths: &[PathBuf], groups: Option<(PathBuf, PathBuf)>, cutoff: f64, out: Option<&Path>) -> Result<()> {
    if paths.is_empty() && groups.is_none() {
        return Err(Error::InvalidInput(
            "nothing to analyze: pass --trajectory and/or --low-maps/--high-maps".into(),
        ));
    }
    let records = paths
        .iter()
        .enumerate()
        .map(|(i, p)| load_trajectory(p, i as u64))
        .collect::<Result<Vec<_>>>()?;
    let trajectories = records
        .iter()
        .zip(paths)
        .map(|(r, p)| {
            let last = LatentState::new(r.states.last().expect("records hold >= 2 states").clone(), 0)?;
            Ok(TrajectoryMetrics {
                file: p.clone(),
                steps: r.states.len(),
                variation: if r.states.len() >= 3 {
                    trajectory_variation(r, cutoff)?
                } else {
                    0.0
                },
                final_intra_frame_variance: intra_frame_variance(&last),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let trajectory_distance = if records.len() >= 2 {
        let steps = records[0].states.len();
        if records.iter().any(|r| r.states.len() != steps) {
            return Err(Error::Shape("trajectories have different step counts".into()));
        }
        let mut total = 0.0;
        for s in 0..steps {
            let at_step: Vec<_> = records.iter().map(|r| r.states[s].clone()).collect();
            total += pairwise_distance(&at_step)?;
        }
        Some(total / steps as f64)
    } else {
        None
    };
    let attention_groups = match groups {
        Some((low, high)) => {
            let low = read_tensor(&low)?.to_attention_maps()?;
            let high = read_tensor(&high)?.to_attention_maps()?;
            Some(group_summary(&low, &high)?)
        }
        None => None,
    };
    let doc: AnalyzeReport = ReportDocument::new(
        "analyze",
        AnalyzePayload {
            cutoff,
            trajectories,
            trajectory_distance,
            attention_groups,
        },
        StageTimings::new(),
    );
    match out {
        Some(path) => {
            doc.write(path)?;
            println!("{}", path.display());
        }
        None => println!("{}", doc.to_json()?),
    }
    Ok(())
}

fn run_oracle(seed: u64) -> Result<()> {
    let checks = oracle::run_all(seed)?;
    for c in &checks {
        println!(
            "{} {}: {} cases, max error {:e} (tolerance {:e})",
            if c.passed { "PASS" } else { "FAIL" },
            c.name,
            c.cases,
            c.max_error,
            c.tolerance
        );
    }
    let failed = checks.iter().filter(|c| !c.passed).count();
    if failed > 0 {
        return Err(Error::Invariant(format!("{failed} oracle check(s) failed")));
    }
    Ok(())
}
