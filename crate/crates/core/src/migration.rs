//! Moving queued work from hot to cold replicas of the same layer.
//!
//! Only waiting requests move; a request inside a dispatched batch stays put.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cluster::ReplicaId;
use crate::pipeline::RequestId;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum MigrationError {
    #[error("destination {0} is not ready")]
    DestinationNotReady(ReplicaId),
    #[error("invalid migration config: {0}")]
    InvalidConfig(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MigrationConfig {
    #[serde(default)]
    pub enabled: bool,
    #[serde(default = "defaults::hot")]
    pub hot_threshold: f64,
    #[serde(default = "defaults::cold")]
    pub cold_threshold: f64,
    #[serde(default = "defaults::delay")]
    pub migration_delay_s: f64,
    #[serde(default = "defaults::period")]
    pub check_period_s: f64,
}

mod defaults {
    pub fn hot() -> f64 {
        0.8
    }
    pub fn cold() -> f64 {
        0.3
    }
    pub fn delay() -> f64 {
        0.05
    }
    pub fn period() -> f64 {
        1.0
    }
}

impl Default for MigrationConfig {
    fn default() -> Self {
        Self {
            enabled: false,
            hot_threshold: defaults::hot(),
            cold_threshold: defaults::cold(),
            migration_delay_s: defaults::delay(),
            check_period_s: defaults::period(),
        }
    }
}

impl MigrationConfig {
    pub fn validate(&self) -> Result<(), MigrationError> {
        if !(0.0 <= self.cold_threshold && self.cold_threshold < self.hot_threshold && self.hot_threshold <= 1.0) {
            return Err(MigrationError::InvalidConfig(
                "require 0 <= cold_threshold < hot_threshold <= 1".into(),
            ));
        }
        if !(self.migration_delay_s >= 0.0 && self.migration_delay_s.is_finite()) {
            return Err(MigrationError::InvalidConfig("migration_delay_s must be >= 0".into()));
        }
        if !(self.check_period_s > 0.0 && self.check_period_s.is_finite()) {
            return Err(MigrationError::InvalidConfig("check_period_s must be > 0".into()));
        }
        Ok(())
    }
}

/// A queued request as seen by the selector.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QueuedEntry {
    pub request: RequestId,
    pub enqueued_at: f64,
}

/// Load snapshot of one Ready replica.
#[derive(Debug, Clone, PartialEq)]
pub struct ReplicaLoad {
    pub id: ReplicaId,
    pub utilization: f64,
    /// Waiting (never in-flight) requests.
    pub queued: Vec<QueuedEntry>,
    /// Requests already on their way here; counted as queued.
    pub inbound: usize,
}

impl ReplicaLoad {
    pub fn queue_len(&self) -> usize {
        self.queued.len() + self.inbound
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Move {
    pub request: RequestId,
    pub from: ReplicaId,
    pub to: ReplicaId,
}

/// Pairs the hottest replica above `hot_threshold` with the coldest below
/// `cold_threshold`, the second hottest with the second coldest, and so on.
/// Each pair moves the newest `ceil((q_hot - q_cold) / 2)` queued requests.
pub fn select_migrations(replicas: &[ReplicaLoad], config: &MigrationConfig) -> Vec<Move> {
    let mut hot: Vec<&ReplicaLoad> = replicas.iter().filter(|r| r.utilization > config.hot_threshold).collect();
    let mut cold: Vec<&ReplicaLoad> = replicas.iter().filter(|r| r.utilization < config.cold_threshold).collect();
    hot.sort_by(|a, b| b.utilization.total_cmp(&a.utilization).then(a.id.cmp(&b.id)));
    cold.sort_by(|a, b| a.utilization.total_cmp(&b.utilization).then(a.id.cmp(&b.id)));

    let mut moves = Vec::new();
    for (h, c) in hot.iter().zip(cold.iter()) {
        let (q_hot, q_cold) = (h.queue_len(), c.queue_len());
        if q_hot <= q_cold {
            continue;
        }
        let n = (q_hot - q_cold).div_ceil(2).min(h.queued.len());
        let mut newest = h.queued.clone();
        newest.sort_by(|a, b| b.enqueued_at.total_cmp(&a.enqueued_at).then(b.request.cmp(&a.request)));
        moves.extend(newest.iter().take(n).map(|e| Move {
            request: e.request,
            from: h.id,
            to: c.id,
        }));
    }
    moves
}
