//! Nodes, network links and the lifecycle of layer-service replicas.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::pipeline::{BatchWork, Phase, QueuedRequest, ReplicaQueue};
use crate::sim::EventHandle;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ClusterError {
    #[error("node {node} has {free} bytes free, replica needs {needed}")]
    InsufficientNodeMemory { node: String, needed: u64, free: u64 },
    #[error("unknown layer {0}")]
    UnknownLayer(usize),
    #[error("unknown node {0}")]
    UnknownNode(String),
    #[error("unknown replica {0}")]
    UnknownReplica(ReplicaId),
    #[error("refusing to retire {replica}: layer {layer} would drop below {min_ready} ready replicas")]
    LastReplicaOfLayer {
        replica: ReplicaId,
        layer: usize,
        min_ready: usize,
    },
    #[error("replica {replica} is {state:?}, not ready")]
    NotReady { replica: ReplicaId, state: ReplicaState },
    #[error("replica {0} is already serving a batch")]
    Busy(ReplicaId),
}

/// One GPU host.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NodeSpec {
    pub node_id: String,
    pub gpu_count: u32,
    pub gpu_memory_bytes: u64,
    #[serde(default = "one")]
    pub compute_scale: f64,
    /// One-way latency to any other node.
    pub net_latency_s: f64,
    pub net_bandwidth_bps: f64,
}

fn one() -> f64 {
    1.0
}

impl NodeSpec {
    pub fn capacity_bytes(&self) -> u64 {
        self.gpu_memory_bytes.saturating_mul(u64::from(self.gpu_count))
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.gpu_count < 1 {
            return Err("gpu_count must be >= 1".into());
        }
        if self.gpu_memory_bytes == 0 {
            return Err("gpu_memory_bytes must be > 0".into());
        }
        if !(self.compute_scale > 0.0 && self.compute_scale.is_finite()) {
            return Err("compute_scale must be > 0".into());
        }
        if !(self.net_bandwidth_bps > 0.0 && self.net_bandwidth_bps.is_finite()) {
            return Err("net_bandwidth_bps must be > 0".into());
        }
        if !(self.net_latency_s >= 0.0 && self.net_latency_s.is_finite()) {
            return Err("net_latency_s must be >= 0".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ReplicaId(pub u32);

impl fmt::Display for ReplicaId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "r{}", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ReplicaState {
    Starting,
    Ready,
    Draining,
    Terminated,
}

/// A dispatched, immutable batch.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub batch_id: u64,
    pub layer: usize,
    pub replica: ReplicaId,
    pub members: Vec<QueuedRequest>,
    pub work: BatchWork,
    pub dispatch_time: f64,
    pub complete_time: f64,
}

impl Batch {
    pub fn phase(&self) -> Phase {
        self.work.phase
    }
}

/// One instance of one layer-service on one node.
#[derive(Debug, Clone)]
pub struct LayerReplica {
    pub id: ReplicaId,
    pub layer: usize,
    pub node: usize,
    pub state: ReplicaState,
    pub queue: ReplicaQueue,
    pub in_flight: Option<Batch>,
    /// Requests routed here that are still on the wire.
    pub inbound: usize,
    pub spawned_at: f64,
    pub ready_at: Option<f64>,
    pub terminated_at: Option<f64>,
    pub cumulative_busy: f64,
    pub memory_footprint: u64,
    pub batch_timer: Option<(f64, EventHandle)>,
}

impl LayerReplica {
    /// Busy seconds accumulated up to `now`, counting the running batch.
    pub fn busy_total(&self, now: f64) -> f64 {
        match &self.in_flight {
            Some(b) => self.cumulative_busy + (now - b.dispatch_time).max(0.0),
            None => self.cumulative_busy,
        }
    }

    /// Queued + in-flight + in-transit requests.
    pub fn outstanding(&self) -> usize {
        self.queue.len() + self.in_flight.as_ref().map_or(0, |b| b.members.len()) + self.inbound
    }

    pub fn is_ready(&self) -> bool {
        self.state == ReplicaState::Ready
    }

    /// Holding memory on its node (everything but Terminated).
    pub fn is_resident(&self) -> bool {
        self.state != ReplicaState::Terminated
    }
}

/// Result of starting a retirement.
#[derive(Debug, Clone, PartialEq)]
pub struct RetireOutcome {
    /// Queued requests that must be re-routed.
    pub drained: Vec<QueuedRequest>,
    pub terminated: bool,
}

pub struct Cluster {
    nodes: Vec<NodeSpec>,
    replicas: Vec<LayerReplica>,
    by_layer: Vec<Vec<ReplicaId>>,
    used_memory: Vec<u64>,
    num_layers: usize,
}

impl Cluster {
    pub fn new(nodes: Vec<NodeSpec>, num_layers: usize) -> Self {
        let used_memory = vec![0; nodes.len()];
        Self {
            nodes,
            replicas: Vec::new(),
            by_layer: vec![Vec::new(); num_layers],
            used_memory,
            num_layers,
        }
    }

    pub fn nodes(&self) -> &[NodeSpec] {
        &self.nodes
    }

    pub fn num_layers(&self) -> usize {
        self.num_layers
    }

    pub fn node_index(&self, node_id: &str) -> Result<usize, ClusterError> {
        self.nodes
            .iter()
            .position(|n| n.node_id == node_id)
            .ok_or_else(|| ClusterError::UnknownNode(node_id.to_string()))
    }

    pub fn free_memory(&self, node: usize) -> u64 {
        self.nodes[node].capacity_bytes().saturating_sub(self.used_memory[node])
    }

    pub fn used_memory(&self, node: usize) -> u64 {
        self.used_memory[node]
    }

    pub fn replicas(&self) -> &[LayerReplica] {
        &self.replicas
    }

    pub fn replica(&self, id: ReplicaId) -> &LayerReplica {
        &self.replicas[id.0 as usize]
    }

    pub fn replica_mut(&mut self, id: ReplicaId) -> &mut LayerReplica {
        &mut self.replicas[id.0 as usize]
    }

    pub fn get(&self, id: ReplicaId) -> Result<&LayerReplica, ClusterError> {
        self.replicas.get(id.0 as usize).ok_or(ClusterError::UnknownReplica(id))
    }

    /// Replicas of `layer` in creation (= id) order.
    pub fn layer_replicas(&self, layer: usize) -> impl Iterator<Item = &LayerReplica> {
        self.by_layer
            .get(layer)
            .into_iter()
            .flatten()
            .map(|id| &self.replicas[id.0 as usize])
    }

    /// Ids of every replica ever placed for `layer`, in creation order.
    pub fn layer_ids(&self, layer: usize) -> &[ReplicaId] {
        &self.by_layer[layer]
    }

    pub fn count(&self, layer: usize, state: ReplicaState) -> usize {
        self.layer_replicas(layer).filter(|r| r.state == state).count()
    }

    /// Node with the most free memory that can hold `footprint` (ties: lowest index).
    pub fn node_with_most_free(&self, footprint: u64) -> Option<usize> {
        (0..self.nodes.len())
            .filter(|&n| self.free_memory(n) >= footprint)
            .max_by(|&a, &b| self.free_memory(a).cmp(&self.free_memory(b)).then(b.cmp(&a)))
    }

    fn place(
        &mut self,
        layer: usize,
        node: usize,
        at: f64,
        footprint: u64,
        state: ReplicaState,
    ) -> Result<ReplicaId, ClusterError> {
        if layer >= self.num_layers {
            return Err(ClusterError::UnknownLayer(layer));
        }
        let spec = self
            .nodes
            .get(node)
            .ok_or_else(|| ClusterError::UnknownNode(format!("#{node}")))?;
        let free = self.free_memory(node);
        if footprint > free {
            return Err(ClusterError::InsufficientNodeMemory {
                node: spec.node_id.clone(),
                needed: footprint,
                free,
            });
        }
        let id = ReplicaId(self.replicas.len() as u32);
        self.used_memory[node] += footprint;
        self.by_layer[layer].push(id);
        self.replicas.push(LayerReplica {
            id,
            layer,
            node,
            state,
            queue: ReplicaQueue::new(),
            in_flight: None,
            inbound: 0,
            spawned_at: at,
            ready_at: (state == ReplicaState::Ready).then_some(at),
            terminated_at: None,
            cumulative_busy: 0.0,
            memory_footprint: footprint,
            batch_timer: None,
        });
        Ok(id)
    }

    /// Places a replica that is serving from time `at` (initial topology).
    pub fn place_ready(&mut self, layer: usize, node: usize, at: f64, footprint: u64) -> Result<ReplicaId, ClusterError> {
        let id = self.place(layer, node, at, footprint, ReplicaState::Starting)?;
        self.mark_ready(id, at);
        Ok(id)
    }

    /// Starts a new replica. The caller schedules its readiness at
    /// `at + startup_delay`; until then it does not serve.
    pub fn spawn_replica(&mut self, layer: usize, node: usize, at: f64, footprint: u64) -> Result<ReplicaId, ClusterError> {
        self.place(layer, node, at, footprint, ReplicaState::Starting)
    }

    /// Starting -> Ready. Returns false if the replica was not Starting.
    pub fn mark_ready(&mut self, id: ReplicaId, now: f64) -> bool {
        let r = self.replica_mut(id);
        if r.state != ReplicaState::Starting {
            return false;
        }
        r.state = ReplicaState::Ready;
        r.ready_at = Some(now);
        true
    }

    /// Moves a Ready replica to Draining, keeping at least `min_ready` Ready
    /// replicas of its layer. Queued requests are handed back for
    /// re-routing; an idle replica terminates at once.
    pub fn retire_replica(&mut self, id: ReplicaId, at: f64, min_ready: usize) -> Result<RetireOutcome, ClusterError> {
        let r = self.get(id)?;
        if r.state != ReplicaState::Ready {
            return Err(ClusterError::NotReady {
                replica: id,
                state: r.state,
            });
        }
        let layer = r.layer;
        let ready = self.count(layer, ReplicaState::Ready);
        if ready <= min_ready.max(1) {
            return Err(ClusterError::LastReplicaOfLayer {
                replica: id,
                layer,
                min_ready: min_ready.max(1),
            });
        }
        let r = self.replica_mut(id);
        r.state = ReplicaState::Draining;
        let drained = r.queue.drain_all();
        let terminated = self.try_terminate(id, at);
        Ok(RetireOutcome { drained, terminated })
    }

    /// Draining -> Terminated once idle with an empty queue. Frees memory.
    pub fn try_terminate(&mut self, id: ReplicaId, now: f64) -> bool {
        let r = self.replica_mut(id);
        if r.state != ReplicaState::Draining || r.in_flight.is_some() || !r.queue.is_empty() {
            return false;
        }
        r.state = ReplicaState::Terminated;
        r.terminated_at = Some(now);
        let (node, footprint) = (r.node, r.memory_footprint);
        self.used_memory[node] -= footprint;
        true
    }

    /// Installs a dispatched batch. Only Ready, idle replicas serve.
    pub fn start_batch(&mut self, batch: Batch) -> Result<(), ClusterError> {
        let id = batch.replica;
        let r = self.get(id)?;
        if r.state != ReplicaState::Ready {
            return Err(ClusterError::NotReady {
                replica: id,
                state: r.state,
            });
        }
        if r.in_flight.is_some() {
            return Err(ClusterError::Busy(id));
        }
        self.replica_mut(id).in_flight = Some(batch);
        Ok(())
    }

    /// Removes the running batch and books its service time.
    pub fn finish_batch(&mut self, id: ReplicaId) -> Option<Batch> {
        let r = self.replica_mut(id);
        let batch = r.in_flight.take()?;
        r.cumulative_busy += batch.complete_time - batch.dispatch_time;
        Some(batch)
    }

    /// One-way transfer time between nodes by index.
    pub fn network_delay_between(&self, src: usize, dst: usize, payload_bytes: u64) -> f64 {
        if src == dst {
            return 0.0;
        }
        // Uniform mesh: the link parameters are the source node's.
        let spec = &self.nodes[src];
        spec.net_latency_s + payload_bytes as f64 / spec.net_bandwidth_bps
    }

    pub fn network_delay(&self, src: &str, dst: &str, payload_bytes: u64) -> Result<f64, ClusterError> {
        let (s, d) = (self.node_index(src)?, self.node_index(dst)?);
        Ok(self.network_delay_between(s, d, payload_bytes))
    }

    /// `(layer, node_id)` of every resident replica, sorted.
    pub fn topology(&self) -> Vec<(usize, String)> {
        let mut t: Vec<_> = self
            .replicas
            .iter()
            .filter(|r| r.is_resident())
            .map(|r| (r.layer, self.nodes[r.node].node_id.clone()))
            .collect();
        t.sort();
        t
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn node(id: &str, mem: u64) -> NodeSpec {
        NodeSpec {
            node_id: id.into(),
            gpu_count: 1,
            gpu_memory_bytes: mem,
            compute_scale: 1.0,
            net_latency_s: 0.001,
            net_bandwidth_bps: 1e9,
        }
    }

    fn cluster() -> Cluster {
        Cluster::new(vec![node("a", 100), node("b", 100)], 8)
    }

    #[test]
    fn spawned_replica_starts_and_becomes_ready() {
        let mut c = cluster();
        let id = c.spawn_replica(3, 0, 100.0, 10).unwrap();
        assert_eq!(c.replica(id).state, ReplicaState::Starting);
        assert_eq!(c.used_memory(0), 10);
        assert!(c.mark_ready(id, 130.0));
        assert_eq!(c.replica(id).ready_at, Some(130.0));
        assert!(!c.mark_ready(id, 131.0));
    }

    #[test]
    fn memory_guard_leaves_replica_count_unchanged() {
        let mut c = cluster();
        c.spawn_replica(0, 0, 0.0, 60).unwrap();
        let err = c.spawn_replica(1, 0, 0.0, 60).unwrap_err();
        assert!(matches!(err, ClusterError::InsufficientNodeMemory { needed: 60, free: 40, .. }));
        assert_eq!(c.replicas().len(), 1);
        assert!(matches!(c.spawn_replica(8, 0, 0.0, 1), Err(ClusterError::UnknownLayer(8))));
        assert!(matches!(c.spawn_replica(0, 5, 0.0, 1), Err(ClusterError::UnknownNode(_))));
        assert_eq!(c.node_with_most_free(50), Some(1));
        assert_eq!(c.node_with_most_free(101), None);
    }

    #[test]
    fn starting_replica_cannot_serve() {
        let mut c = cluster();
        let id = c.spawn_replica(0, 0, 0.0, 1).unwrap();
        let batch = Batch {
            batch_id: 0,
            layer: 0,
            replica: id,
            members: vec![],
            work: BatchWork {
                phase: Phase::Prefill,
                tokens: vec![],
            },
            dispatch_time: 0.0,
            complete_time: 1.0,
        };
        assert!(matches!(c.start_batch(batch.clone()), Err(ClusterError::NotReady { .. })));
        c.mark_ready(id, 0.5);
        c.start_batch(batch.clone()).unwrap();
        assert!(matches!(c.start_batch(batch), Err(ClusterError::Busy(_))));
        assert_eq!(c.replica(id).busy_total(0.75), 0.75);
        c.finish_batch(id).unwrap();
        assert_eq!(c.replica(id).cumulative_busy, 1.0);
    }

    #[test]
    fn sole_replica_cannot_be_retired() {
        let mut c = cluster();
        let id = c.place_ready(5, 0, 0.0, 1).unwrap();
        assert!(matches!(
            c.retire_replica(id, 1.0, 1),
            Err(ClusterError::LastReplicaOfLayer { layer: 5, .. })
        ));
        assert_eq!(c.replica(id).state, ReplicaState::Ready);
    }

    #[test]
    fn idle_replica_terminates_immediately_and_frees_memory() {
        let mut c = cluster();
        c.place_ready(2, 0, 0.0, 30).unwrap();
        let id = c.place_ready(2, 1, 0.0, 30).unwrap();
        let out = c.retire_replica(id, 10.0, 1).unwrap();
        assert!(out.terminated);
        assert!(out.drained.is_empty());
        assert_eq!(c.replica(id).state, ReplicaState::Terminated);
        assert_eq!(c.used_memory(1), 0);
        assert_eq!(c.topology(), vec![(2, "a".to_string())]);
    }

    #[test]
    fn queued_work_is_handed_back_on_retire() {
        let mut c = cluster();
        c.place_ready(2, 0, 0.0, 1).unwrap();
        let id = c.place_ready(2, 1, 0.0, 1).unwrap();
        for i in 0..3 {
            c.replica_mut(id).queue.push(QueuedRequest {
                request: i,
                phase: Phase::Decode,
                enqueued_at: i as f64,
            });
        }
        let out = c.retire_replica(id, 5.0, 1).unwrap();
        assert_eq!(out.drained.len(), 3);
        assert!(out.terminated);
    }

    #[test]
    fn busy_replica_drains_before_terminating() {
        let mut c = cluster();
        c.place_ready(0, 0, 0.0, 1).unwrap();
        let id = c.place_ready(0, 1, 0.0, 1).unwrap();
        c.start_batch(Batch {
            batch_id: 1,
            layer: 0,
            replica: id,
            members: vec![],
            work: BatchWork {
                phase: Phase::Decode,
                tokens: vec![],
            },
            dispatch_time: 0.0,
            complete_time: 2.0,
        })
        .unwrap();
        let out = c.retire_replica(id, 1.0, 1).unwrap();
        assert!(!out.terminated);
        assert_eq!(c.replica(id).state, ReplicaState::Draining);
        assert!(!c.try_terminate(id, 1.5));
        c.finish_batch(id);
        assert!(c.try_terminate(id, 2.0));
    }

    #[test]
    fn network_delay_examples() {
        let c = cluster();
        assert_eq!(c.network_delay("a", "a", 1_000_000).unwrap(), 0.0);
        assert!((c.network_delay("a", "b", 1_000_000).unwrap() - 0.002).abs() < 1e-15);
        assert_eq!(c.network_delay("a", "b", 0).unwrap(), 0.001);
        assert!(matches!(c.network_delay("a", "z", 0), Err(ClusterError::UnknownNode(_))));
    }
}
