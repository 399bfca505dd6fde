//! The operations behind the command-line verbs.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::engine::{EngineError, RunOutputs, SimOptions, Simulation};
use crate::profiler::{
    comparison_summary, read_decisions, read_requests, write_decisions, write_json, write_requests,
    write_timeseries, BottleneckReport, ComparisonSummary, OutputError, ProfilerError, RunDigest,
};
use crate::scenario::{ConfigError, ScenarioConfig};

pub const REQUESTS_FILE: &str = "requests.csv";
pub const TIMESERIES_FILE: &str = "timeseries.csv";
pub const DECISIONS_FILE: &str = "decisions.csv";
pub const BOTTLENECK_FILE: &str = "bottleneck.json";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const COMPARISON_FILE: &str = "comparison.json";
pub const LAYER_TABLE_FILE: &str = "layer_latency_table.csv";

const RUN_FILES: [&str; 5] = [REQUESTS_FILE, TIMESERIES_FILE, DECISIONS_FILE, BOTTLENECK_FILE, MANIFEST_FILE];

#[derive(Debug, Error)]
pub enum CommandError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("simulation failed: {0}")]
    Engine(#[from] EngineError),
    #[error(transparent)]
    Output(#[from] OutputError),
    #[error(transparent)]
    Profiler(#[from] ProfilerError),
    #[error("{dir} is not a complete run directory: missing {missing}")]
    IncompleteRunDir { dir: PathBuf, missing: String },
    #[error("{dir}: {message}")]
    BadRunDir { dir: PathBuf, message: String },
    #[error("cannot create {path}: {source}")]
    CreateDir {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl CommandError {
    /// 2 for configuration problems, 3 for everything that fails at run time.
    pub fn exit_code(&self) -> i32 {
        match self {
            CommandError::Config(_) => 2,
            _ => 3,
        }
    }
}

/// A parsed, validated scenario and the directory its relative paths use.
#[derive(Debug, Clone)]
pub struct LoadedScenario {
    pub config: ScenarioConfig,
    pub base_dir: PathBuf,
}

impl LoadedScenario {
    pub fn load(path: &Path) -> Result<Self, CommandError> {
        let config = ScenarioConfig::from_file(path)?;
        config.validate()?;
        let base_dir = path
            .parent()
            .filter(|p| !p.as_os_str().is_empty())
            .unwrap_or(Path::new("."))
            .to_path_buf();
        Ok(Self { config, base_dir })
    }

    pub fn simulate(&self) -> Result<RunOutputs, CommandError> {
        let options = SimOptions {
            base_dir: Some(self.base_dir.clone()),
            ..Default::default()
        };
        Ok(Simulation::new(self.config.clone(), options)?.run()?)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub tool: String,
    pub version: String,
    pub scenario: String,
    pub config_hash: String,
    pub workload_hash: String,
    pub seed: u64,
    pub duration_s: f64,
    pub autoscaler_enabled: bool,
    pub migration_enabled: bool,
    pub admitted: u64,
    pub completed: u64,
    pub in_system: u64,
    pub events_fired: u64,
}

#[derive(Debug, Serialize)]
struct BottleneckError<'a> {
    error: &'a str,
}

/// Writes every output file of one run into `dir`.
pub fn write_run_dir(dir: &Path, config: &ScenarioConfig, outputs: &RunOutputs) -> Result<Manifest, CommandError> {
    std::fs::create_dir_all(dir).map_err(|source| CommandError::CreateDir {
        path: dir.to_path_buf(),
        source,
    })?;
    write_requests(&dir.join(REQUESTS_FILE), &outputs.requests)?;
    write_timeseries(&dir.join(TIMESERIES_FILE), &outputs.timeseries)?;
    write_decisions(&dir.join(DECISIONS_FILE), &outputs.decisions)?;
    match &outputs.bottleneck {
        Ok(report) => write_json(&dir.join(BOTTLENECK_FILE), report)?,
        Err(e) => write_json(
            &dir.join(BOTTLENECK_FILE),
            &BottleneckError {
                error: &e.to_string(),
            },
        )?,
    }
    let manifest = Manifest {
        tool: "layerserve".into(),
        version: env!("CARGO_PKG_VERSION").into(),
        scenario: config.name.clone(),
        config_hash: config.config_hash(),
        workload_hash: outputs.workload_hash.clone(),
        seed: config.seed,
        duration_s: config.duration_s,
        autoscaler_enabled: config.autoscaler.enabled,
        migration_enabled: config.migration.enabled,
        admitted: outputs.admitted,
        completed: outputs.completed,
        in_system: outputs.in_system(),
        events_fired: outputs.events_fired,
    };
    write_json(&dir.join(MANIFEST_FILE), &manifest)?;
    Ok(manifest)
}

fn default_out_dir(config: &ScenarioConfig) -> PathBuf {
    config
        .outputs
        .clone()
        .unwrap_or_else(|| Path::new("runs").join(&config.name))
}

pub struct RunResult {
    pub out_dir: PathBuf,
    pub manifest: Manifest,
    pub outputs: RunOutputs,
}

pub fn run(config_path: &Path, seed: Option<u64>, out: Option<&Path>) -> Result<RunResult, CommandError> {
    let mut scenario = LoadedScenario::load(config_path)?;
    if let Some(seed) = seed {
        scenario.config.seed = seed;
    }
    let out_dir = out.map_or_else(|| default_out_dir(&scenario.config), Path::to_path_buf);
    let outputs = scenario.simulate()?;
    let manifest = write_run_dir(&out_dir, &scenario.config, &outputs)?;
    Ok(RunResult {
        out_dir,
        manifest,
        outputs,
    })
}

pub struct CompareResult {
    pub out_dir: PathBuf,
    pub summary: ComparisonSummary,
    pub baseline: RunOutputs,
    pub treatment: RunOutputs,
}

/// The two arms of a comparison: autoscaling and migration off, then
/// autoscaling on with migration as configured. Both share the seed.
pub fn comparison_arms(config: &ScenarioConfig) -> (ScenarioConfig, ScenarioConfig) {
    let mut baseline = config.clone();
    baseline.autoscaler.enabled = false;
    baseline.migration.enabled = false;
    let mut treatment = config.clone();
    treatment.autoscaler.enabled = true;
    (baseline, treatment)
}

pub fn compare(config_path: &Path, seed: Option<u64>, out: Option<&Path>) -> Result<CompareResult, CommandError> {
    let mut scenario = LoadedScenario::load(config_path)?;
    if let Some(seed) = seed {
        scenario.config.seed = seed;
    }
    let (b_cfg, t_cfg) = comparison_arms(&scenario.config);
    t_cfg.validate()?;
    let arm = |config: ScenarioConfig| LoadedScenario {
        config,
        base_dir: scenario.base_dir.clone(),
    };
    let (b_arm, t_arm) = (arm(b_cfg), arm(t_cfg));
    let (baseline, treatment) = std::thread::scope(|s| {
        let b = s.spawn(|| b_arm.simulate());
        let t = t_arm.simulate();
        (b.join().expect("baseline arm panicked"), t)
    });
    let (baseline, treatment) = (baseline?, treatment?);

    let out_dir = out.map_or_else(|| default_out_dir(&scenario.config), Path::to_path_buf);
    write_run_dir(&out_dir.join("baseline"), &b_arm.config, &baseline)?;
    write_run_dir(&out_dir.join("treatment"), &t_arm.config, &treatment)?;
    let summary = comparison_summary(digest(&baseline), digest(&treatment))?;
    write_json(&out_dir.join(COMPARISON_FILE), &summary)?;
    Ok(CompareResult {
        out_dir,
        summary,
        baseline,
        treatment,
    })
}

pub struct ReportResult {
    pub report: BottleneckReport,
    pub manifest: Manifest,
    pub completed_requests: usize,
    pub decisions: usize,
    pub text: String,
}

/// Reads a run directory and renders its bottleneck analysis. Also writes
/// the per-layer table next to the run's files.
pub fn report(run_dir: &Path) -> Result<ReportResult, CommandError> {
    if let Some(missing) = RUN_FILES.iter().find(|f| !run_dir.join(f).is_file()) {
        return Err(CommandError::IncompleteRunDir {
            dir: run_dir.to_path_buf(),
            missing: (*missing).to_string(),
        });
    }
    let bad = |message: String| CommandError::BadRunDir {
        dir: run_dir.to_path_buf(),
        message,
    };
    let read_json = |name: &str| -> Result<serde_json::Value, CommandError> {
        let text = std::fs::read_to_string(run_dir.join(name)).map_err(|e| bad(format!("{name}: {e}")))?;
        serde_json::from_str(&text).map_err(|e| bad(format!("{name}: {e}")))
    };
    let manifest: Manifest =
        serde_json::from_value(read_json(MANIFEST_FILE)?).map_err(|e| bad(format!("{MANIFEST_FILE}: {e}")))?;
    let bottleneck = read_json(BOTTLENECK_FILE)?;
    if let Some(err) = bottleneck.get("error").and_then(|e| e.as_str()) {
        return Err(bad(format!("run has no bottleneck report: {err}")));
    }
    let report: BottleneckReport =
        serde_json::from_value(bottleneck).map_err(|e| bad(format!("{BOTTLENECK_FILE}: {e}")))?;
    let requests = read_requests(&run_dir.join(REQUESTS_FILE))?;
    let decisions = read_decisions(&run_dir.join(DECISIONS_FILE))?;

    write_layer_table(&run_dir.join(LAYER_TABLE_FILE), &report)?;

    let mut text = format!(
        "scenario {} (seed {}): {} requests completed, {} decisions\n",
        manifest.scenario,
        manifest.seed,
        requests.len(),
        decisions.len()
    );
    text.push_str(&format!("bottleneck layer: {}\n", report.bottleneck_layer));
    text.push_str(&report.to_table());
    Ok(ReportResult {
        report,
        manifest,
        completed_requests: requests.len(),
        decisions: decisions.len(),
        text,
    })
}

fn write_layer_table(path: &Path, report: &BottleneckReport) -> Result<(), CommandError> {
    std::fs::write(path, report.to_table()).map_err(|source| {
        CommandError::Output(OutputError::Io {
            path: path.to_path_buf(),
            source,
        })
    })
}

pub fn validate(config_path: &Path) -> Result<ScenarioConfig, CommandError> {
    Ok(LoadedScenario::load(config_path)?.config)
}

fn digest(o: &RunOutputs) -> RunDigest<'_> {
    RunDigest {
        workload_hash: &o.workload_hash,
        duration_s: o.duration_s,
        records: &o.requests,
    }
}
