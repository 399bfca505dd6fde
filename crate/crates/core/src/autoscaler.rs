//! HPA-style per-layer horizontal scaling.
//!
//! Each sync period the reconciler computes
//! `desired = ceil(current * utilization / target)`, raises it to
//! `current + 1` when the layer's p95 batch latency exceeds the latency
//! threshold, and in predictive mode to `ceil(forecast / capacity)`.
//! Scale-out applies at once; scale-in only when no scale-out was
//! recommended within the stabilization window.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::predictor::ForecasterConfig;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum AutoscalerError {
    #[error("target metric must be > 0, got {0}")]
    InvalidTarget(f64),
    #[error("per-replica capacity must be > 0, got {0}")]
    InvalidCapacity(f64),
    #[error("invalid autoscaler config: {0}")]
    InvalidConfig(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScalingMode {
    #[default]
    Reactive,
    Predictive,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AutoscalerConfig {
    #[serde(default)]
    pub enabled: bool,
    #[serde(default = "defaults::sync_period")]
    pub sync_period_s: f64,
    #[serde(default = "defaults::target_utilization")]
    pub target_utilization: f64,
    /// p95 per-layer batch latency above which one extra replica is requested.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub latency_threshold_s: Option<f64>,
    #[serde(default = "defaults::min_replicas")]
    pub min_replicas: usize,
    #[serde(default = "defaults::max_replicas")]
    pub max_replicas: usize,
    #[serde(default = "defaults::stabilization")]
    pub scale_down_stabilization_s: f64,
    #[serde(default)]
    pub mode: ScalingMode,
    /// Requests per second one replica sustains; used in predictive mode.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub per_replica_capacity_rps: Option<f64>,
    #[serde(default)]
    pub forecaster: ForecasterConfig,
    /// Layers under autoscaling; empty means every layer.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub layers: Vec<usize>,
}

mod defaults {
    pub fn sync_period() -> f64 {
        15.0
    }
    pub fn target_utilization() -> f64 {
        0.6
    }
    pub fn min_replicas() -> usize {
        1
    }
    pub fn max_replicas() -> usize {
        8
    }
    pub fn stabilization() -> f64 {
        300.0
    }
}

impl Default for AutoscalerConfig {
    fn default() -> Self {
        Self {
            enabled: false,
            sync_period_s: defaults::sync_period(),
            target_utilization: defaults::target_utilization(),
            latency_threshold_s: None,
            min_replicas: defaults::min_replicas(),
            max_replicas: defaults::max_replicas(),
            scale_down_stabilization_s: defaults::stabilization(),
            mode: ScalingMode::Reactive,
            per_replica_capacity_rps: None,
            forecaster: ForecasterConfig::default(),
            layers: Vec::new(),
        }
    }
}

impl AutoscalerConfig {
    pub fn validate(&self) -> Result<(), AutoscalerError> {
        let bad = |m: &str| Err(AutoscalerError::InvalidConfig(m.into()));
        if !(self.sync_period_s > 0.0 && self.sync_period_s.is_finite()) {
            return bad("sync_period_s must be > 0");
        }
        if !(self.target_utilization > 0.0 && self.target_utilization <= 1.0) {
            return bad("target_utilization must be in (0, 1]");
        }
        if self.min_replicas < 1 || self.min_replicas > self.max_replicas {
            return bad("require 1 <= min_replicas <= max_replicas");
        }
        if self.latency_threshold_s.is_some_and(|t| t.is_nan() || t <= 0.0) {
            return bad("latency_threshold_s must be > 0");
        }
        if self.scale_down_stabilization_s < 0.0 {
            return bad("scale_down_stabilization_s must be >= 0");
        }
        if self.mode == ScalingMode::Predictive && !self.per_replica_capacity_rps.is_some_and(|c| c > 0.0) {
            return bad("predictive mode needs per_replica_capacity_rps > 0");
        }
        match self.forecaster {
            ForecasterConfig::Ewma { alpha } if !(alpha > 0.0 && alpha <= 1.0) => bad("forecaster alpha must be in (0, 1]"),
            ForecasterConfig::WindowMean { k: 0 } => bad("forecaster k must be >= 1"),
            _ => Ok(()),
        }
    }

    pub fn applies_to(&self, layer: usize) -> bool {
        self.layers.is_empty() || self.layers.contains(&layer)
    }

    fn clamp(&self, n: usize) -> usize {
        n.clamp(self.min_replicas, self.max_replicas)
    }
}

/// `ceil(x)` that treats values within rounding noise of an integer as that
/// integer, so `2 * 0.9 / 0.6` is 3 and not 4.
fn ceil_tolerant(x: f64) -> f64 {
    let r = x.round();
    if (x - r).abs() <= 1e-9 * r.abs().max(1.0) {
        r
    } else {
        x.ceil()
    }
}

/// Proportional HPA rule, clamped to `[min_replicas, max_replicas]`.
pub fn desired_replicas(
    current: usize,
    current_metric: f64,
    target_metric: f64,
    config: &AutoscalerConfig,
) -> Result<usize, AutoscalerError> {
    if !(target_metric > 0.0 && target_metric.is_finite()) {
        return Err(AutoscalerError::InvalidTarget(target_metric));
    }
    let raw = ceil_tolerant(current.max(1) as f64 * current_metric.max(0.0) / target_metric);
    Ok(config.clamp(raw as usize))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LatencyTrigger {
    ScaleOutByOne,
    None,
}

/// Fires when the window's p95 strictly exceeds the threshold.
pub fn latency_trigger(p95_layer_latency: Option<f64>, threshold: f64) -> LatencyTrigger {
    match p95_layer_latency {
        Some(p95) if p95 > threshold => LatencyTrigger::ScaleOutByOne,
        _ => LatencyTrigger::None,
    }
}

pub fn predictive_target(forecast_load: f64, per_replica_capacity: f64, config: &AutoscalerConfig) -> Result<usize, AutoscalerError> {
    if !(per_replica_capacity > 0.0 && per_replica_capacity.is_finite()) {
        return Err(AutoscalerError::InvalidCapacity(per_replica_capacity));
    }
    let raw = ceil_tolerant(forecast_load.max(0.0) / per_replica_capacity);
    Ok(config.clamp(raw as usize))
}

/// Observations for one layer over the last sync window.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerWindowMetrics {
    pub ready: usize,
    pub starting: usize,
    /// Mean busy fraction across Ready and Starting replicas (Starting count as idle).
    pub utilization: f64,
    pub p95_latency: Option<f64>,
    pub forecast_load: Option<f64>,
}

impl LayerWindowMetrics {
    pub fn current(&self) -> usize {
        self.ready + self.starting
    }
}

/// Per-layer memory of the reconciler.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct LayerScalingState {
    pub last_scale_out_recommendation: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScalingAction {
    None,
    ScaleOut(usize),
    ScaleIn(usize),
    /// Scale-in wanted but suppressed by the stabilization window.
    HoldScaleIn,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScalingOutcome {
    pub layer: usize,
    pub current: usize,
    pub desired: usize,
    pub action: ScalingAction,
    pub latency_triggered: bool,
}

impl ScalingOutcome {
    /// One-line, comma-free description for the decisions file.
    pub fn detail(&self, metrics: &LayerWindowMetrics) -> String {
        let action = match self.action {
            ScalingAction::None => "none".to_string(),
            ScalingAction::ScaleOut(n) => format!("scale_out+{n}"),
            ScalingAction::ScaleIn(n) => format!("scale_in-{n}"),
            ScalingAction::HoldScaleIn => "hold".to_string(),
        };
        let p95 = metrics.p95_latency.map_or("na".to_string(), |p| format!("{p:.6}"));
        let forecast = metrics.forecast_load.map_or("na".to_string(), |f| format!("{f:.3}"));
        format!(
            "action={action} current={} desired={} ready={} starting={} util={:.4} p95={p95} latency_trigger={} forecast={forecast}",
            self.current, self.desired, metrics.ready, metrics.starting, metrics.utilization, self.latency_triggered
        )
    }
}

/// One reconcile pass for one layer.
pub fn reconcile(
    layer: usize,
    metrics: &LayerWindowMetrics,
    config: &AutoscalerConfig,
    state: &mut LayerScalingState,
    now: f64,
) -> Result<ScalingOutcome, AutoscalerError> {
    let current = metrics.current();
    let mut desired = desired_replicas(current, metrics.utilization, config.target_utilization, config)?;
    let latency_triggered = config
        .latency_threshold_s
        .is_some_and(|th| latency_trigger(metrics.p95_latency, th) == LatencyTrigger::ScaleOutByOne);
    if latency_triggered {
        desired = config.clamp(desired.max(current + 1));
    }
    if config.mode == ScalingMode::Predictive {
        if let (Some(load), Some(cap)) = (metrics.forecast_load, config.per_replica_capacity_rps) {
            desired = desired.max(predictive_target(load, cap, config)?);
        }
    }
    let action = if desired > current {
        state.last_scale_out_recommendation = Some(now);
        ScalingAction::ScaleOut(desired - current)
    } else if desired < current {
        let recent = state
            .last_scale_out_recommendation
            .is_some_and(|t| now - t < config.scale_down_stabilization_s);
        if recent {
            ScalingAction::HoldScaleIn
        } else {
            ScalingAction::ScaleIn(current - desired)
        }
    } else {
        ScalingAction::None
    };
    Ok(ScalingOutcome {
        layer,
        current,
        desired,
        action,
        latency_triggered,
    })
}
