//! Metrics collection, latency statistics, bottleneck identification and
//! baseline-versus-treatment comparison.
//!
//! Per-layer "latency" is measured per batch, from the moment its oldest
//! member joined the replica queue to batch completion, so queueing at a
//! saturated layer shows up in that layer's numbers. Pure service time is
//! kept alongside.

mod output;
mod stats;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use output::{
    read_decisions, read_requests, read_timeseries, write_decisions, write_json, write_requests, write_timeseries,
    OutputError,
};
pub use stats::{mean, percentile, skewness, time_average_in_system, StatsError};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ProfilerError {
    #[error("layer {0} has no batch-latency samples")]
    MissingLayerData(usize),
    #[error("runs are not comparable: workload hash {baseline} vs {treatment}")]
    MismatchedScenarios { baseline: String, treatment: String },
    #[error(transparent)]
    Stats(#[from] StatsError),
}

/// One completed request, as written to the requests file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RequestRecord {
    pub request_id: u64,
    pub arrival_time_s: f64,
    pub ttft_s: f64,
    pub e2e_s: f64,
    pub mean_tpot_s: f64,
    pub input_tokens: u32,
    pub output_tokens: u32,
    /// Largest latency this request saw at each layer (not serialized).
    #[serde(skip)]
    pub layer_max_latency: Vec<f64>,
}

/// One replica at one sampling instant.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimeseriesRow {
    pub time_s: f64,
    pub layer_id: usize,
    pub replica_id: u32,
    pub utilization: f64,
    pub queue_len: usize,
}

/// System-wide counters for one sampling window.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricsSample {
    pub time: f64,
    pub arrivals: u64,
    pub completions: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum DecisionKind {
    ScaleDecision,
    MigrationComplete,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecisionRecord {
    pub time_s: f64,
    pub kind: DecisionKind,
    pub layer_id: usize,
    pub detail: String,
}

/// Per-layer batch latency logs gathered during a run.
#[derive(Debug, Clone, Default)]
pub struct LayerLatencyLog {
    latency: Vec<Vec<f64>>,
    service: Vec<Vec<f64>>,
}

impl LayerLatencyLog {
    pub fn new(num_layers: usize) -> Self {
        Self {
            latency: vec![Vec::new(); num_layers],
            service: vec![Vec::new(); num_layers],
        }
    }

    pub fn record(&mut self, layer: usize, latency: f64, service: f64) {
        self.latency[layer].push(latency);
        self.service[layer].push(service);
    }

    pub fn num_layers(&self) -> usize {
        self.latency.len()
    }

    pub fn latencies(&self, layer: usize) -> &[f64] {
        &self.latency[layer]
    }

    pub fn service_times(&self, layer: usize) -> &[f64] {
        &self.service[layer]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerLatencyStats {
    pub layer_id: usize,
    pub batches: usize,
    pub max_latency_s: f64,
    pub p50_latency_s: f64,
    pub p95_latency_s: f64,
    /// Population-moment skewness; absent when the sample is degenerate.
    pub skewness: Option<f64>,
    pub max_service_s: f64,
    /// This layer's max latency over the smallest per-layer max.
    pub ratio_to_min: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BottleneckReport {
    pub layers: Vec<LayerLatencyStats>,
    /// Layer ids by descending max latency; ties go to the lower id.
    pub ranking: Vec<usize>,
    pub bottleneck_layer: usize,
    pub min_layer_max_s: f64,
    pub latency_definition: String,
    pub percentile_method: String,
    pub skewness_estimator: String,
}

impl BottleneckReport {
    pub fn layer(&self, layer: usize) -> Option<&LayerLatencyStats> {
        self.layers.iter().find(|l| l.layer_id == layer)
    }

    /// `max(a) / max(b)`.
    pub fn max_latency_ratio(&self, a: usize, b: usize) -> Option<f64> {
        Some(self.layer(a)?.max_latency_s / self.layer(b)?.max_latency_s)
    }

    /// Comma-separated per-layer table, one row per layer in id order.
    pub fn to_table(&self) -> String {
        let mut out = String::from("layer_id,max_latency_s,p50_latency_s,p95_latency_s,skewness,max_service_s,batches,ratio_to_min\n");
        for l in &self.layers {
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{}\n",
                l.layer_id,
                l.max_latency_s,
                l.p50_latency_s,
                l.p95_latency_s,
                l.skewness.map_or(String::new(), |s| s.to_string()),
                l.max_service_s,
                l.batches,
                l.ratio_to_min
            ));
        }
        out
    }
}

pub fn bottleneck_report(log: &LayerLatencyLog) -> Result<BottleneckReport, ProfilerError> {
    let mut layers = Vec::with_capacity(log.num_layers());
    for layer in 0..log.num_layers() {
        let lat = log.latencies(layer);
        if lat.is_empty() {
            return Err(ProfilerError::MissingLayerData(layer));
        }
        let max = lat.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        layers.push(LayerLatencyStats {
            layer_id: layer,
            batches: lat.len(),
            max_latency_s: max,
            p50_latency_s: percentile(lat, 0.5)?,
            p95_latency_s: percentile(lat, 0.95)?,
            skewness: skewness(lat).ok(),
            max_service_s: log.service_times(layer).iter().copied().fold(0.0, f64::max),
            ratio_to_min: 0.0,
        });
    }
    let min = layers.iter().map(|l| l.max_latency_s).fold(f64::INFINITY, f64::min);
    for l in &mut layers {
        l.ratio_to_min = if min > 0.0 { l.max_latency_s / min } else { f64::INFINITY };
    }
    let mut ranking: Vec<usize> = (0..layers.len()).collect();
    ranking.sort_by(|&a, &b| layers[b].max_latency_s.total_cmp(&layers[a].max_latency_s).then(a.cmp(&b)));
    Ok(BottleneckReport {
        bottleneck_layer: ranking[0],
        ranking,
        min_layer_max_s: min,
        layers,
        latency_definition: "batch queue-inclusive: completion minus oldest member's enqueue time".into(),
        percentile_method: "nearest-rank".into(),
        skewness_estimator: "population moments (g1)".into(),
    })
}

/// Headline numbers of one run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArmSummary {
    pub completed: usize,
    pub duration_s: f64,
    pub mean_e2e_s: f64,
    pub p95_e2e_s: f64,
    pub mean_ttft_s: f64,
    pub throughput_qps: f64,
}

impl ArmSummary {
    pub fn from_records(records: &[RequestRecord], duration_s: f64) -> Self {
        let e2e: Vec<f64> = records.iter().map(|r| r.e2e_s).collect();
        let ttft: Vec<f64> = records.iter().map(|r| r.ttft_s).collect();
        Self {
            completed: records.len(),
            duration_s,
            mean_e2e_s: mean(&e2e).unwrap_or(f64::NAN),
            p95_e2e_s: percentile(&e2e, 0.95).unwrap_or(f64::NAN),
            mean_ttft_s: mean(&ttft).unwrap_or(f64::NAN),
            throughput_qps: records.len() as f64 / duration_s,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonSummary {
    pub workload_hash: String,
    pub baseline: ArmSummary,
    pub treatment: ArmSummary,
    /// treatment / baseline mean end-to-end latency.
    pub latency_ratio: f64,
    pub p95_latency_ratio: f64,
    /// treatment / baseline completed requests per second.
    pub throughput_ratio: f64,
}

/// Outputs of one run needed for comparison.
#[derive(Debug, Clone, Copy)]
pub struct RunDigest<'a> {
    pub workload_hash: &'a str,
    pub duration_s: f64,
    pub records: &'a [RequestRecord],
}

pub fn comparison_summary(baseline: RunDigest<'_>, treatment: RunDigest<'_>) -> Result<ComparisonSummary, ProfilerError> {
    if baseline.workload_hash != treatment.workload_hash {
        return Err(ProfilerError::MismatchedScenarios {
            baseline: baseline.workload_hash.to_string(),
            treatment: treatment.workload_hash.to_string(),
        });
    }
    let b = ArmSummary::from_records(baseline.records, baseline.duration_s);
    let t = ArmSummary::from_records(treatment.records, treatment.duration_s);
    Ok(ComparisonSummary {
        workload_hash: baseline.workload_hash.to_string(),
        latency_ratio: t.mean_e2e_s / b.mean_e2e_s,
        p95_latency_ratio: t.p95_e2e_s / b.p95_e2e_s,
        throughput_ratio: t.throughput_qps / b.throughput_qps,
        baseline: b,
        treatment: t,
    })
}
