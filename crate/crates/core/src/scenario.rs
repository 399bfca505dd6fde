//! Scenario files: one JSON document (comments allowed) describing the
//! cluster, model costs, workload and policies of an experiment.

use std::collections::BTreeMap;
use std::io::Read;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::autoscaler::AutoscalerConfig;
use crate::balancer::BalancerConfig;
use crate::cluster::NodeSpec;
use crate::migration::MigrationConfig;
use crate::pipeline::{BatchPolicy, CostParams, ModelSpec};
use crate::workload::WorkloadSpec;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("config parse error at `{field}`: {message}")]
    Parse { field: String, message: String },
    #[error("invalid config field `{field}`: {message}")]
    Validation { field: String, message: String },
}

impl ConfigError {
    fn invalid(field: impl Into<String>, message: impl ToString) -> Self {
        ConfigError::Validation {
            field: field.into(),
            message: message.to_string(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub name: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub description: Option<String>,
    pub seed: u64,
    pub duration_s: f64,
    #[serde(default = "default_sampling")]
    pub sampling_interval_s: f64,
    pub cluster: Vec<NodeSpec>,
    pub model: ModelConfig,
    #[serde(default)]
    pub placement: Placement,
    pub workload: WorkloadSpec,
    #[serde(default)]
    pub balancer: BalancerConfig,
    #[serde(default)]
    pub autoscaler: AutoscalerConfig,
    #[serde(default)]
    pub migration: MigrationConfig,
    #[serde(default)]
    pub batching: BatchPolicy,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub outputs: Option<PathBuf>,
}

fn default_sampling() -> f64 {
    0.1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    #[serde(default = "default_layers")]
    pub num_layers: usize,
    pub hidden_dim: u64,
    #[serde(default = "default_startup")]
    pub startup_delay_s: f64,
    /// Costs of every layer not named in `layer_costs`.
    pub default_cost: CostParams,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub layer_costs: Vec<LayerCostOverride>,
}

fn default_layers() -> usize {
    40
}

fn default_startup() -> f64 {
    30.0
}

/// Replaces the cost parameters of the listed layers. Later entries win.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerCostOverride {
    pub layers: Vec<usize>,
    pub cost: CostParams,
}

impl ModelConfig {
    pub fn layer_costs(&self) -> Vec<CostParams> {
        let mut costs = vec![self.default_cost; self.num_layers];
        for o in &self.layer_costs {
            for &l in &o.layers {
                if let Some(slot) = costs.get_mut(l) {
                    *slot = o.cost;
                }
            }
        }
        costs
    }

    pub fn model_spec(&self) -> Result<ModelSpec, crate::pipeline::PipelineError> {
        ModelSpec::new(self.hidden_dim, self.layer_costs())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Placement {
    /// Replica `k` of layer `l` goes to node `(l * replicas_per_layer + k) % nodes`.
    RoundRobin {
        #[serde(default = "one")]
        replicas_per_layer: usize,
    },
    Explicit { replicas: Vec<ReplicaPlacement> },
}

fn one() -> usize {
    1
}

impl Default for Placement {
    fn default() -> Self {
        Placement::RoundRobin { replicas_per_layer: 1 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReplicaPlacement {
    pub layer: usize,
    pub node: String,
}

impl ScenarioConfig {
    pub fn from_json_str(text: &str) -> Result<Self, ConfigError> {
        Self::from_reader(text.as_bytes())
    }

    pub fn from_reader<R: Read>(reader: R) -> Result<Self, ConfigError> {
        let stripped = json_comments::StripComments::new(reader);
        let mut de = serde_json::Deserializer::from_reader(stripped);
        serde_path_to_error::deserialize(&mut de).map_err(|e| {
            let field = e.path().to_string();
            ConfigError::Parse {
                field,
                message: e.into_inner().to_string(),
            }
        })
    }

    pub fn from_file(path: &Path) -> Result<Self, ConfigError> {
        let file = std::fs::File::open(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_reader(std::io::BufReader::new(file))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Initial `(layer, node index)` replica layout.
    pub fn initial_layout(&self) -> Result<Vec<(usize, usize)>, ConfigError> {
        let nodes = self.cluster.len();
        match &self.placement {
            Placement::RoundRobin { replicas_per_layer } => {
                let per = *replicas_per_layer;
                Ok((0..self.model.num_layers)
                    .flat_map(|l| (0..per).map(move |k| (l, (l * per + k) % nodes)))
                    .collect())
            }
            Placement::Explicit { replicas } => replicas
                .iter()
                .enumerate()
                .map(|(i, r)| {
                    let node = self
                        .cluster
                        .iter()
                        .position(|n| n.node_id == r.node)
                        .ok_or_else(|| ConfigError::invalid(format!("placement.replicas[{i}].node"), format!("unknown node {:?}", r.node)))?;
                    Ok((r.layer, node))
                })
                .collect(),
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.name.trim().is_empty() {
            return Err(ConfigError::invalid("name", "must not be empty"));
        }
        if !(self.duration_s > 0.0 && self.duration_s.is_finite()) {
            return Err(ConfigError::invalid("duration_s", "must be > 0"));
        }
        if !(self.sampling_interval_s > 0.0 && self.sampling_interval_s.is_finite()) {
            return Err(ConfigError::invalid("sampling_interval_s", "must be > 0"));
        }

        if self.cluster.is_empty() {
            return Err(ConfigError::invalid("cluster", "needs at least one node"));
        }
        let mut ids = std::collections::BTreeSet::new();
        for (i, n) in self.cluster.iter().enumerate() {
            n.validate().map_err(|m| ConfigError::invalid(format!("cluster[{i}]"), m))?;
            if !ids.insert(n.node_id.as_str()) {
                return Err(ConfigError::invalid(format!("cluster[{i}].node_id"), format!("duplicate node id {:?}", n.node_id)));
            }
        }

        let num_layers = self.model.num_layers;
        if num_layers < 1 {
            return Err(ConfigError::invalid("model.num_layers", "must be >= 1"));
        }
        if !(self.model.startup_delay_s >= 0.0 && self.model.startup_delay_s.is_finite()) {
            return Err(ConfigError::invalid("model.startup_delay_s", "must be >= 0"));
        }
        for (i, o) in self.model.layer_costs.iter().enumerate() {
            if let Some(&l) = o.layers.iter().find(|&&l| l >= num_layers) {
                return Err(ConfigError::invalid(
                    format!("model.layer_costs[{i}].layers"),
                    format!("layer {l} out of range 0..{num_layers}"),
                ));
            }
        }
        for (layer, c) in self.model.layer_costs().iter().enumerate() {
            c.validate()
                .map_err(|m| ConfigError::invalid(format!("model cost of layer {layer}"), m))?;
        }

        let layout = self.initial_layout()?;
        if let Placement::RoundRobin { replicas_per_layer: 0 } = self.placement {
            return Err(ConfigError::invalid("placement.replicas_per_layer", "must be >= 1"));
        }
        let mut per_layer = vec![0usize; num_layers];
        for (i, &(layer, _)) in layout.iter().enumerate() {
            if layer >= num_layers {
                return Err(ConfigError::invalid(
                    format!("placement.replicas[{i}].layer"),
                    format!("layer {layer} out of range 0..{num_layers}"),
                ));
            }
            per_layer[layer] += 1;
        }
        if let Some(l) = per_layer.iter().position(|&c| c == 0) {
            return Err(ConfigError::invalid("placement", format!("layer {l} has no replica")));
        }
        let costs = self.model.layer_costs();
        let mut used: BTreeMap<usize, u64> = BTreeMap::new();
        for &(layer, node) in &layout {
            *used.entry(node).or_default() += costs[layer].memory_bytes;
        }
        for (node, bytes) in used {
            if bytes > self.cluster[node].capacity_bytes() {
                return Err(ConfigError::invalid(
                    "placement",
                    format!("node {} needs {bytes} bytes, has {}", self.cluster[node].node_id, self.cluster[node].capacity_bytes()),
                ));
            }
        }

        self.workload
            .validate()
            .map_err(|e| ConfigError::invalid("workload", e))?;
        if self.balancer.utilization_window_s.is_nan() || self.balancer.utilization_window_s <= 0.0 {
            return Err(ConfigError::invalid("balancer.utilization_window_s", "must be > 0"));
        }
        self.autoscaler
            .validate()
            .map_err(|e| ConfigError::invalid("autoscaler", e))?;
        if let Some(&l) = self.autoscaler.layers.iter().find(|&&l| l >= num_layers) {
            return Err(ConfigError::invalid(
                "autoscaler.layers",
                format!("layer {l} out of range 0..{num_layers}"),
            ));
        }
        if self.autoscaler.enabled {
            for (layer, &count) in per_layer.iter().enumerate() {
                if self.autoscaler.applies_to(layer) && count > self.autoscaler.max_replicas {
                    return Err(ConfigError::invalid(
                        "autoscaler.max_replicas",
                        format!("layer {layer} starts with {count} replicas"),
                    ));
                }
            }
        }
        self.migration
            .validate()
            .map_err(|e| ConfigError::invalid("migration", e))?;
        if self.batching.max_size < 1 {
            return Err(ConfigError::invalid("batching.max_size", "must be >= 1"));
        }
        if !(self.batching.max_wait_s >= 0.0 && self.batching.max_wait_s.is_finite()) {
            return Err(ConfigError::invalid("batching.max_wait_s", "must be >= 0"));
        }
        Ok(())
    }

    /// SHA-256 of the canonical serialization.
    pub fn config_hash(&self) -> String {
        sha256_hex(serde_json::to_string(self).expect("config serializes").as_bytes())
    }

    /// Identifies the offered load: workload, seed and duration.
    pub fn workload_hash(&self) -> String {
        let w = serde_json::to_string(&self.workload).expect("workload serializes");
        sha256_hex(format!("{w}|seed={}|duration={}", self.seed, self.duration_s).as_bytes())
    }
}

fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}
