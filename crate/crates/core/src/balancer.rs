//! Per-hop replica selection.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cluster::ReplicaId;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum BalancerError {
    #[error("layer {layer} has no ready replica")]
    NoReadyReplica { layer: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BalancerKind {
    RoundRobin,
    #[default]
    LeastOutstanding,
    WeightedLeastUtilization,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BalancerConfig {
    #[serde(default)]
    pub policy: BalancerKind,
    #[serde(default = "default_window")]
    pub utilization_window_s: f64,
}

fn default_window() -> f64 {
    1.0
}

impl Default for BalancerConfig {
    fn default() -> Self {
        Self {
            policy: BalancerKind::default(),
            utilization_window_s: default_window(),
        }
    }
}

/// What the balancer sees of one replica at decision time.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReplicaView {
    pub id: ReplicaId,
    pub ready: bool,
    /// Queued + in-flight + in-transit requests.
    pub outstanding: usize,
    /// Busy fraction over the utilization window.
    pub utilization: f64,
    /// Node speed relative to reference hardware.
    pub compute_scale: f64,
}

#[derive(Debug, Clone, Default)]
struct Cursor {
    position: usize,
    last: Option<ReplicaId>,
}

pub struct Balancer {
    kind: BalancerKind,
    cursors: Vec<Cursor>,
}

impl Balancer {
    pub fn new(kind: BalancerKind, num_layers: usize) -> Self {
        Self {
            kind,
            cursors: vec![Cursor::default(); num_layers],
        }
    }

    pub fn kind(&self) -> BalancerKind {
        self.kind
    }

    /// Round-robin position within the layer's ready set.
    pub fn cursor(&self, layer: usize) -> usize {
        self.cursors[layer].position
    }

    /// Chooses a Ready replica for `layer`. Ties go to the lowest id.
    pub fn pick_replica(&mut self, layer: usize, view: &[ReplicaView]) -> Result<ReplicaId, BalancerError> {
        let mut ready: Vec<&ReplicaView> = view.iter().filter(|r| r.ready).collect();
        if ready.is_empty() {
            return Err(BalancerError::NoReadyReplica { layer });
        }
        ready.sort_by_key(|r| r.id);
        let pick = match self.kind {
            BalancerKind::RoundRobin => {
                let cursor = &mut self.cursors[layer];
                let idx = next_after(&ready, cursor.last);
                cursor.last = Some(ready[idx].id);
                cursor.position = (idx + 1) % ready.len();
                ready[idx].id
            }
            BalancerKind::LeastOutstanding => {
                ready
                    .iter()
                    .min_by(|a, b| a.outstanding.cmp(&b.outstanding).then(a.id.cmp(&b.id)))
                    .expect("non-empty")
                    .id
            }
            BalancerKind::WeightedLeastUtilization => {
                let score = |r: &ReplicaView| r.utilization / r.compute_scale;
                ready
                    .iter()
                    .min_by(|a, b| score(a).total_cmp(&score(b)).then(a.id.cmp(&b.id)))
                    .expect("non-empty")
                    .id
            }
        };
        Ok(pick)
    }

    /// Re-anchors the round-robin cursor after the ready set of `layer`
    /// changed, so the rotation continues after the last replica picked.
    pub fn rebalance_on_membership_change(&mut self, layer: usize, view: &[ReplicaView]) {
        let mut ready: Vec<&ReplicaView> = view.iter().filter(|r| r.ready).collect();
        ready.sort_by_key(|r| r.id);
        let cursor = &mut self.cursors[layer];
        cursor.position = if ready.is_empty() {
            0
        } else {
            next_after(&ready, cursor.last)
        };
    }
}

/// Index of the first ready replica with id greater than `last`, wrapping.
fn next_after(ready: &[&ReplicaView], last: Option<ReplicaId>) -> usize {
    match last {
        None => 0,
        Some(last) => ready.iter().position(|r| r.id > last).unwrap_or(0),
    }
}
