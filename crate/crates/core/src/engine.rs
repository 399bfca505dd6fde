//! The simulation loop: wires the cluster, batching, balancer, autoscaler
//! and migration together on one event queue.

use std::collections::VecDeque;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::autoscaler::{reconcile, AutoscalerError, LayerScalingState, LayerWindowMetrics, ScalingAction, ScalingMode};
use crate::balancer::{Balancer, BalancerKind, ReplicaView};
use crate::cluster::{Batch, Cluster, ClusterError, ReplicaId, ReplicaState};
use crate::migration::{select_migrations, QueuedEntry, ReplicaLoad};
use crate::pipeline::{
    advance_request, form_batch, service_time, BatchDecision, BatchWork, ModelSpec, Phase, PipelineError,
    QueuedRequest, Request, RequestId, RoutingAction,
};
use crate::predictor::{Forecaster, LoadSeries, PredictorError};
use crate::profiler::{
    bottleneck_report, percentile, BottleneckReport, DecisionKind, DecisionRecord, LayerLatencyLog, MetricsSample,
    ProfilerError, RequestRecord, TimeseriesRow,
};
use crate::scenario::ScenarioConfig;
use crate::sim::{Distribution, EventQueue, RandomStream, SimError};
use crate::workload::{gen_requests, Arrival, ArrivalProcess, ClosedLoopDriver, LengthSource, WorkloadError, WorkloadStreams};

#[derive(Debug, Error)]
pub enum EngineError {
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Cluster(#[from] ClusterError),
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
    #[error(transparent)]
    Workload(#[from] WorkloadError),
    #[error(transparent)]
    Autoscaler(#[from] AutoscalerError),
    #[error(transparent)]
    Predictor(#[from] PredictorError),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Event {
    RequestArrival { request: RequestId },
    /// A request routed to a replica on another node reaches it.
    HopArrival { request: RequestId, replica: ReplicaId },
    /// Batching timer of a replica expired.
    BatchDispatch { replica: ReplicaId },
    LayerComplete { replica: ReplicaId },
    TokenEmitted { request: RequestId },
    ReplicaReady { replica: ReplicaId },
    MetricsTick,
    ScaleDecision,
    MigrationCheck,
    MigrationComplete { request: RequestId, from: ReplicaId, to: ReplicaId },
    WorkloadPhaseChange { phase: usize },
}

impl Event {
    pub fn kind(&self) -> &'static str {
        match self {
            Event::RequestArrival { .. } => "RequestArrival",
            Event::HopArrival { .. } => "HopArrival",
            Event::BatchDispatch { .. } => "BatchDispatch",
            Event::LayerComplete { .. } => "LayerComplete",
            Event::TokenEmitted { .. } => "TokenEmitted",
            Event::ReplicaReady { .. } => "ReplicaReady",
            Event::MetricsTick => "MetricsTick",
            Event::ScaleDecision => "ScaleDecision",
            Event::MigrationCheck => "MigrationCheck",
            Event::MigrationComplete { .. } => "MigrationComplete",
            Event::WorkloadPhaseChange { .. } => "WorkloadPhaseChange",
        }
    }
}

/// Replaces the cost model with a caller-supplied service time. Used by
/// tests that need a textbook queue.
pub trait ServiceTimeHook: Send {
    fn service_time(&mut self, layer: usize, work: &BatchWork, rng: &mut RandomStream) -> Result<f64, SimError>;
}

/// Exponentially distributed service time per batch.
#[derive(Debug, Clone, Copy)]
pub struct ExponentialService {
    pub rate: f64,
}

impl ServiceTimeHook for ExponentialService {
    fn service_time(&mut self, _layer: usize, _work: &BatchWork, rng: &mut RandomStream) -> Result<f64, SimError> {
        rng.draw(&Distribution::Exponential { rate: self.rate })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FiredEvent {
    pub time: f64,
    pub sequence: u64,
    pub kind: &'static str,
}

/// Replica counts of a layer right after a membership change.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TopologyChange {
    pub time: f64,
    pub layer: usize,
    pub ready: usize,
    pub starting: usize,
    pub draining: usize,
}

#[derive(Default)]
pub struct SimOptions {
    /// Directory that relative workload file paths resolve against.
    pub base_dir: Option<PathBuf>,
    pub service_hook: Option<Box<dyn ServiceTimeHook>>,
    /// Keep `(time, sequence, kind)` of every fired event.
    pub record_events: bool,
}

/// Everything a finished run produced.
pub struct RunOutputs {
    pub requests: Vec<RequestRecord>,
    pub timeseries: Vec<TimeseriesRow>,
    pub samples: Vec<MetricsSample>,
    pub decisions: Vec<DecisionRecord>,
    pub latency_log: LayerLatencyLog,
    pub bottleneck: Result<BottleneckReport, ProfilerError>,
    pub admitted: u64,
    pub completed: u64,
    /// Arrival times of requests admitted but not finished at the horizon.
    pub in_system_arrivals: Vec<f64>,
    pub events_fired: u64,
    pub final_clock: f64,
    pub initial_topology: Vec<(usize, String)>,
    pub final_topology: Vec<(usize, String)>,
    pub topology_log: Vec<TopologyChange>,
    /// Highest used/capacity memory fraction any node reached.
    pub peak_memory_fraction: f64,
    pub event_log: Vec<FiredEvent>,
    pub workload_hash: String,
    pub duration_s: f64,
}

impl RunOutputs {
    pub fn in_system(&self) -> u64 {
        self.admitted - self.completed
    }
}

/// Seconds of load history fed to the predictor per bucket.
const LOAD_BUCKET_S: f64 = 1.0;
/// Buckets of load history kept.
const LOAD_HISTORY: usize = 600;

pub struct Simulation {
    config: ScenarioConfig,
    model: ModelSpec,
    queue: EventQueue<Event>,
    cluster: Cluster,
    balancer: Balancer,
    requests: Vec<Request>,
    /// Node of the replica that last served each request.
    request_node: Vec<usize>,
    streams: WorkloadStreams,
    lengths: LengthSource,
    service_stream: RandomStream,
    service_hook: Option<Box<dyn ServiceTimeHook>>,
    open_loop: VecDeque<Arrival>,
    closed_loop: Option<ClosedLoopDriver>,
    /// Requests waiting for a layer that has no Ready replica.
    pending: Vec<VecDeque<(RequestId, Option<usize>)>>,
    next_batch_id: u64,

    tick: u64,
    tick_marks: Vec<f64>,
    util_history: Vec<VecDeque<(f64, f64)>>,
    window_arrivals: u64,
    window_completions: u64,
    bucket_arrivals: u64,
    bucket_start: f64,
    load_series: LoadSeries,

    scaling_state: Vec<LayerScalingState>,
    scale_marks: Vec<f64>,
    scale_window_latency: Vec<Vec<f64>>,
    migration_marks: Vec<f64>,

    records: Vec<RequestRecord>,
    timeseries: Vec<TimeseriesRow>,
    samples: Vec<MetricsSample>,
    decisions: Vec<DecisionRecord>,
    latency_log: LayerLatencyLog,
    event_log: Option<Vec<FiredEvent>>,
    topology_log: Vec<TopologyChange>,
    peak_memory_fraction: f64,
    initial_topology: Vec<(usize, String)>,
    admitted_mask: Vec<bool>,
    admitted: u64,
    completed: u64,
}

impl Simulation {
    pub fn new(config: ScenarioConfig, options: SimOptions) -> Result<Self, EngineError> {
        let model = config.model.model_spec()?;
        let num_layers = model.num_layers;
        let base_dir = options.base_dir.unwrap_or_else(|| Path::new(".").to_path_buf());
        let mut streams = WorkloadStreams::new(config.seed);
        let lengths = LengthSource::new(&config.workload, &base_dir)?;
        let open_loop = gen_requests(&config.workload, config.duration_s, &mut streams, &base_dir)?;
        let closed_loop = match config.workload.arrival {
            ArrivalProcess::ClosedLoop { concurrency } => {
                let horizon = config.workload.duration_s.unwrap_or(config.duration_s);
                Some(ClosedLoopDriver::new(concurrency, horizon)?)
            }
            _ => None,
        };

        let mut cluster = Cluster::new(config.cluster.clone(), num_layers);
        let layout = config
            .initial_layout()
            .map_err(|e| WorkloadError::InvalidSpec(e.to_string()))?;
        for (layer, node) in layout {
            cluster.place_ready(layer, node, 0.0, model.costs[layer].memory_bytes)?;
        }
        let initial_topology = cluster.topology();
        let replicas = cluster.replicas().len();

        let mut sim = Self {
            balancer: Balancer::new(config.balancer.policy, num_layers),
            service_stream: RandomStream::new(config.seed, "service"),
            service_hook: options.service_hook,
            open_loop: open_loop.into(),
            closed_loop,
            pending: vec![VecDeque::new(); num_layers],
            next_batch_id: 0,
            tick: 0,
            tick_marks: vec![0.0; replicas],
            util_history: vec![VecDeque::new(); replicas],
            window_arrivals: 0,
            window_completions: 0,
            bucket_arrivals: 0,
            bucket_start: 0.0,
            load_series: LoadSeries::default(),
            scaling_state: vec![LayerScalingState::default(); num_layers],
            scale_marks: vec![0.0; replicas],
            scale_window_latency: vec![Vec::new(); num_layers],
            migration_marks: vec![0.0; replicas],
            records: Vec::new(),
            timeseries: Vec::new(),
            samples: Vec::new(),
            decisions: Vec::new(),
            latency_log: LayerLatencyLog::new(num_layers),
            event_log: options.record_events.then(Vec::new),
            topology_log: Vec::new(),
            peak_memory_fraction: 0.0,
            initial_topology,
            admitted_mask: Vec::new(),
            admitted: 0,
            completed: 0,
            requests: Vec::new(),
            request_node: Vec::new(),
            queue: EventQueue::new(),
            streams,
            lengths,
            cluster,
            model,
            config,
        };
        sim.note_memory();
        Ok(sim)
    }

    pub fn run(mut self) -> Result<RunOutputs, EngineError> {
        self.bootstrap()?;
        let t_end = self.config.duration_s;
        while let Some(fired) = self.queue.pop_until(t_end) {
            if let Some(log) = &mut self.event_log {
                log.push(FiredEvent {
                    time: fired.fire_time,
                    sequence: fired.sequence,
                    kind: fired.event.kind(),
                });
            }
            self.handle(fired.event)?;
        }
        self.queue.advance_to(t_end);
        Ok(self.finish())
    }

    fn now(&self) -> f64 {
        self.queue.now()
    }

    fn bootstrap(&mut self) -> Result<(), EngineError> {
        let t_end = self.config.duration_s;
        if let Some(driver) = &mut self.closed_loop {
            let n = driver.start();
            for _ in 0..n {
                let (input_len, output_len) = self.lengths.draw(&mut self.streams)?;
                let id = self.new_request(Arrival {
                    time: 0.0,
                    input_len,
                    output_len,
                });
                self.queue.schedule(0.0, Event::RequestArrival { request: id })?;
            }
        }
        self.schedule_next_open_arrival()?;
        for (i, phase) in self.config.workload.phases.iter().enumerate() {
            if phase.start_s > 0.0 && phase.start_s < t_end {
                self.queue.schedule(phase.start_s, Event::WorkloadPhaseChange { phase: i })?;
            }
        }
        self.queue.schedule(self.config.sampling_interval_s, Event::MetricsTick)?;
        if self.config.autoscaler.enabled {
            self.queue.schedule(self.config.autoscaler.sync_period_s, Event::ScaleDecision)?;
        }
        if self.config.migration.enabled {
            self.queue.schedule(self.config.migration.check_period_s, Event::MigrationCheck)?;
        }
        Ok(())
    }

    fn new_request(&mut self, arrival: Arrival) -> RequestId {
        let id = self.requests.len() as RequestId;
        self.requests.push(Request::new(
            id,
            arrival.time,
            arrival.input_len,
            arrival.output_len,
            self.model.num_layers,
        ));
        self.request_node.push(0);
        self.admitted_mask.push(false);
        id
    }

    fn schedule_next_open_arrival(&mut self) -> Result<(), EngineError> {
        if let Some(a) = self.open_loop.pop_front() {
            let id = self.new_request(a);
            self.queue.schedule(a.time, Event::RequestArrival { request: id })?;
        }
        Ok(())
    }

    fn handle(&mut self, event: Event) -> Result<(), EngineError> {
        match event {
            Event::RequestArrival { request } => {
                self.admitted += 1;
                self.admitted_mask[request as usize] = true;
                self.window_arrivals += 1;
                self.bucket_arrivals += 1;
                self.route(request, 0, None)?;
                if self.closed_loop.is_none() {
                    self.schedule_next_open_arrival()?;
                }
            }
            Event::HopArrival { request, replica } => {
                self.cluster.replica_mut(replica).inbound -= 1;
                self.enqueue(replica, request)?;
            }
            Event::BatchDispatch { replica } => {
                self.cluster.replica_mut(replica).batch_timer = None;
                self.try_dispatch(replica)?;
            }
            Event::LayerComplete { replica } => self.on_layer_complete(replica)?,
            Event::TokenEmitted { request } => {
                if self.requests[request as usize].phase == Phase::Done {
                    self.on_request_done(request)?;
                } else {
                    let node = self.request_node[request as usize];
                    self.route(request, 0, Some(node))?;
                }
            }
            Event::ReplicaReady { replica } => self.on_replica_ready(replica)?,
            Event::MetricsTick => self.on_metrics_tick()?,
            Event::ScaleDecision => self.on_scale_decision()?,
            Event::MigrationCheck => self.on_migration_check()?,
            Event::MigrationComplete { request, from, to } => self.on_migration_complete(request, from, to)?,
            Event::WorkloadPhaseChange { .. } => {}
        }
        Ok(())
    }

    fn replica_views(&self, layer: usize) -> Vec<ReplicaView> {
        let now = self.now();
        let weighted = self.balancer.kind() == BalancerKind::WeightedLeastUtilization;
        self.cluster
            .layer_replicas(layer)
            .filter(|r| r.is_resident())
            .map(|r| ReplicaView {
                id: r.id,
                ready: r.is_ready(),
                outstanding: r.outstanding(),
                utilization: if weighted { self.window_utilization(r.id, now) } else { 0.0 },
                compute_scale: self.cluster.nodes()[r.node].compute_scale,
            })
            .collect()
    }

    /// Busy fraction of a replica over the balancer's utilization window.
    fn window_utilization(&self, id: ReplicaId, now: f64) -> f64 {
        let busy = self.cluster.replica(id).busy_total(now);
        match self.util_history[id.0 as usize].front() {
            Some(&(t, b)) if now > t => ((busy - b) / (now - t)).clamp(0.0, 1.0),
            _ => 0.0,
        }
    }

    /// Sends `request` to a replica of `layer`, from `from_node` (None for
    /// requests entering the system).
    fn route(&mut self, request: RequestId, layer: usize, from_node: Option<usize>) -> Result<(), EngineError> {
        let views = self.replica_views(layer);
        let Ok(id) = self.balancer.pick_replica(layer, &views) else {
            self.pending[layer].push_back((request, from_node));
            return Ok(());
        };
        let dst = self.cluster.replica(id).node;
        let delay = match from_node {
            Some(src) => {
                let bytes = self.model.transfer_bytes(self.requests[request as usize].transfer_tokens());
                self.cluster.network_delay_between(src, dst, bytes)
            }
            None => 0.0,
        };
        if delay > 0.0 {
            self.cluster.replica_mut(id).inbound += 1;
            self.queue.schedule_in(delay, Event::HopArrival { request, replica: id })?;
            Ok(())
        } else {
            self.enqueue(id, request)
        }
    }

    fn enqueue(&mut self, id: ReplicaId, request: RequestId) -> Result<(), EngineError> {
        let replica = self.cluster.replica(id);
        if !replica.is_ready() {
            // Retired while the request was on the wire.
            let (layer, node) = (replica.layer, replica.node);
            return self.route(request, layer, Some(node));
        }
        let phase = self.requests[request as usize].phase;
        let now = self.now();
        self.cluster.replica_mut(id).queue.push(QueuedRequest {
            request,
            phase,
            enqueued_at: now,
        });
        self.try_dispatch(id)
    }

    fn try_dispatch(&mut self, id: ReplicaId) -> Result<(), EngineError> {
        let now = self.now();
        let policy = self.config.batching;
        let replica = self.cluster.replica_mut(id);
        if !replica.is_ready() || replica.in_flight.is_some() {
            return Ok(());
        }
        match form_batch(&mut replica.queue, &policy, now) {
            BatchDecision::Dispatch { phase, members } => {
                if let Some((_, h)) = replica.batch_timer.take() {
                    self.queue.cancel(h);
                }
                let (layer, node) = (replica.layer, replica.node);
                let work = BatchWork {
                    phase,
                    tokens: members
                        .iter()
                        .map(|m| self.requests[m.request as usize].work_tokens())
                        .collect(),
                };
                let service = match &mut self.service_hook {
                    Some(hook) => hook.service_time(layer, &work, &mut self.service_stream)?,
                    None => service_time(
                        &self.model.costs[layer],
                        &work,
                        self.cluster.nodes()[node].compute_scale,
                    )?,
                };
                let batch_id = self.next_batch_id;
                self.next_batch_id += 1;
                self.cluster.start_batch(Batch {
                    batch_id,
                    layer,
                    replica: id,
                    members,
                    work,
                    dispatch_time: now,
                    complete_time: now + service,
                })?;
                self.queue.schedule(now + service, Event::LayerComplete { replica: id })?;
            }
            BatchDecision::WaitUntil(t) => {
                let t = t.max(now);
                if replica.batch_timer.map(|(at, _)| at) != Some(t) {
                    if let Some((_, h)) = replica.batch_timer.take() {
                        self.queue.cancel(h);
                    }
                    let h = self.queue.schedule(t, Event::BatchDispatch { replica: id })?;
                    self.cluster.replica_mut(id).batch_timer = Some((t, h));
                }
            }
            BatchDecision::Empty => {
                if let Some((_, h)) = replica.batch_timer.take() {
                    self.queue.cancel(h);
                }
            }
        }
        Ok(())
    }

    fn on_layer_complete(&mut self, id: ReplicaId) -> Result<(), EngineError> {
        let now = self.now();
        let batch = self
            .cluster
            .finish_batch(id)
            .ok_or(PipelineError::InconsistentPipelineState {
                request: 0,
                layer: self.cluster.replica(id).layer,
                reason: "completion without a running batch",
            })?;
        let node = self.cluster.replica(id).node;
        let layer = batch.layer;
        let oldest = batch
            .members
            .iter()
            .map(|m| m.enqueued_at)
            .fold(f64::INFINITY, f64::min);
        let latency = now - oldest;
        self.latency_log
            .record(layer, latency, batch.complete_time - batch.dispatch_time);
        self.scale_window_latency[layer].push(latency);

        let num_layers = self.model.num_layers;
        for m in &batch.members {
            let req = &mut self.requests[m.request as usize];
            req.record_layer_latency(layer, now - m.enqueued_at);
            self.request_node[m.request as usize] = node;
            match advance_request(req, layer, num_layers, now)? {
                RoutingAction::Forward(next) => self.route(m.request, next, Some(node))?,
                RoutingAction::TokenReenter | RoutingAction::Finished => {
                    self.queue.schedule(now, Event::TokenEmitted { request: m.request })?;
                }
            }
        }

        if self.cluster.replica(id).state == ReplicaState::Draining {
            if self.cluster.try_terminate(id, now) {
                self.note_topology(layer);
            }
        } else {
            self.try_dispatch(id)?;
        }
        Ok(())
    }

    fn on_request_done(&mut self, request: RequestId) -> Result<(), EngineError> {
        let now = self.now();
        self.completed += 1;
        self.window_completions += 1;
        let req = &self.requests[request as usize];
        self.records.push(RequestRecord {
            request_id: req.id,
            arrival_time_s: req.arrival_time,
            ttft_s: req.ttft.unwrap_or(f64::NAN),
            e2e_s: req.e2e_latency().unwrap_or(f64::NAN),
            mean_tpot_s: req.mean_tpot().unwrap_or(f64::NAN),
            input_tokens: req.input_len,
            output_tokens: req.output_len,
            layer_max_latency: req.layer_max_latency.clone(),
        });
        // Finished requests keep only their id; free the per-layer vector.
        self.requests[request as usize].layer_max_latency = Vec::new();

        let reissue = self.closed_loop.as_mut().is_some_and(|d| d.on_completion(now));
        if reissue {
            let (input_len, output_len) = self.lengths.draw(&mut self.streams)?;
            let id = self.new_request(Arrival {
                time: now,
                input_len,
                output_len,
            });
            self.queue.schedule(now, Event::RequestArrival { request: id })?;
        }
        Ok(())
    }

    fn on_replica_ready(&mut self, id: ReplicaId) -> Result<(), EngineError> {
        let now = self.now();
        if !self.cluster.mark_ready(id, now) {
            return Ok(());
        }
        let layer = self.cluster.replica(id).layer;
        let views = self.replica_views(layer);
        self.balancer.rebalance_on_membership_change(layer, &views);
        self.note_topology(layer);
        let waiting: Vec<_> = self.pending[layer].drain(..).collect();
        for (request, node) in waiting {
            self.route(request, layer, node)?;
        }
        Ok(())
    }

    fn ensure_replica_slots(&mut self) {
        let n = self.cluster.replicas().len();
        self.tick_marks.resize(n, 0.0);
        self.scale_marks.resize(n, 0.0);
        self.migration_marks.resize(n, 0.0);
        self.util_history.resize(n, VecDeque::new());
    }

    fn on_metrics_tick(&mut self) -> Result<(), EngineError> {
        let now = self.now();
        let interval = self.config.sampling_interval_s;
        self.tick += 1;
        let weighted = self.balancer.kind() == BalancerKind::WeightedLeastUtilization;
        let window = self.config.balancer.utilization_window_s;
        for r in self.cluster.replicas() {
            if !r.is_resident() {
                continue;
            }
            let i = r.id.0 as usize;
            let busy = r.busy_total(now);
            let utilization = ((busy - self.tick_marks[i]) / interval).clamp(0.0, 1.0);
            self.tick_marks[i] = busy;
            self.timeseries.push(TimeseriesRow {
                time_s: now,
                layer_id: r.layer,
                replica_id: r.id.0,
                utilization,
                queue_len: r.queue.len(),
            });
            if weighted {
                let h = &mut self.util_history[i];
                h.push_back((now, busy));
                while h.len() > 1 && now - h[1].0 >= window {
                    h.pop_front();
                }
            }
        }
        self.samples.push(MetricsSample {
            time: now,
            arrivals: self.window_arrivals,
            completions: self.window_completions,
        });
        self.window_arrivals = 0;
        self.window_completions = 0;

        if now - self.bucket_start >= LOAD_BUCKET_S - 1e-9 {
            let rate = self.bucket_arrivals as f64 / (now - self.bucket_start);
            self.load_series.push(now, rate)?;
            self.load_series.truncate_front(LOAD_HISTORY);
            self.bucket_arrivals = 0;
            self.bucket_start = now;
        }

        self.queue
            .schedule((self.tick + 1) as f64 * interval, Event::MetricsTick)?;
        Ok(())
    }

    fn on_scale_decision(&mut self) -> Result<(), EngineError> {
        let now = self.now();
        let cfg = self.config.autoscaler.clone();
        let period = cfg.sync_period_s;
        let forecast = if cfg.mode == ScalingMode::Predictive && !self.load_series.is_empty() {
            Some(cfg.forecaster.forecast(&self.load_series.rates())?)
        } else {
            None
        };

        for layer in 0..self.model.num_layers {
            if !cfg.applies_to(layer) {
                continue;
            }
            let (mut ready, mut starting, mut busy) = (0usize, 0usize, 0.0);
            for r in self.cluster.layer_replicas(layer) {
                match r.state {
                    ReplicaState::Ready => {
                        ready += 1;
                        busy += ((r.busy_total(now) - self.scale_marks[r.id.0 as usize]) / period).clamp(0.0, 1.0);
                    }
                    ReplicaState::Starting => starting += 1,
                    _ => {}
                }
            }
            let members = ready + starting;
            let metrics = LayerWindowMetrics {
                ready,
                starting,
                utilization: if members > 0 { busy / members as f64 } else { 0.0 },
                p95_latency: percentile(&self.scale_window_latency[layer], 0.95).ok(),
                forecast_load: forecast,
            };
            self.scale_window_latency[layer].clear();
            let outcome = reconcile(layer, &metrics, &cfg, &mut self.scaling_state[layer], now)?;
            if outcome.desired == outcome.current {
                continue;
            }
            let mut detail = outcome.detail(&metrics);
            match outcome.action {
                ScalingAction::ScaleOut(n) => {
                    let footprint = self.model.costs[layer].memory_bytes;
                    let mut spawned = 0;
                    for _ in 0..n {
                        let Some(node) = self.cluster.node_with_most_free(footprint) else {
                            break;
                        };
                        let id = self.cluster.spawn_replica(layer, node, now, footprint)?;
                        self.ensure_replica_slots();
                        self.queue
                            .schedule(now + self.config.model.startup_delay_s, Event::ReplicaReady { replica: id })?;
                        spawned += 1;
                    }
                    if spawned < n {
                        detail.push_str(&format!(" spawned={spawned} insufficient_memory"));
                    }
                    self.note_memory();
                    self.note_topology(layer);
                }
                ScalingAction::ScaleIn(n) => {
                    let mut candidates: Vec<(usize, ReplicaId)> = self
                        .cluster
                        .layer_replicas(layer)
                        .filter(|r| r.is_ready())
                        .map(|r| (r.outstanding(), r.id))
                        .collect();
                    candidates.sort_by(|a, b| a.0.cmp(&b.0).then(b.1.cmp(&a.1)));
                    let mut retired = 0;
                    for (_, id) in candidates.into_iter().take(n) {
                        let Ok(out) = self.cluster.retire_replica(id, now, cfg.min_replicas) else {
                            break;
                        };
                        retired += 1;
                        let node = self.cluster.replica(id).node;
                        for q in out.drained {
                            self.route(q.request, layer, Some(node))?;
                        }
                    }
                    if retired < n {
                        detail.push_str(&format!(" retired={retired}"));
                    }
                    let views = self.replica_views(layer);
                    self.balancer.rebalance_on_membership_change(layer, &views);
                    self.note_topology(layer);
                }
                ScalingAction::HoldScaleIn | ScalingAction::None => {}
            }
            self.decisions.push(DecisionRecord {
                time_s: now,
                kind: DecisionKind::ScaleDecision,
                layer_id: layer,
                detail,
            });
        }

        for r in self.cluster.replicas() {
            self.scale_marks[r.id.0 as usize] = r.busy_total(now);
        }
        self.queue.schedule(now + period, Event::ScaleDecision)?;
        Ok(())
    }

    fn on_migration_check(&mut self) -> Result<(), EngineError> {
        let now = self.now();
        let cfg = self.config.migration.clone();
        let period = cfg.check_period_s;
        for layer in 0..self.model.num_layers {
            let loads: Vec<ReplicaLoad> = self
                .cluster
                .layer_replicas(layer)
                .filter(|r| r.is_ready())
                .map(|r| ReplicaLoad {
                    id: r.id,
                    utilization: ((r.busy_total(now) - self.migration_marks[r.id.0 as usize]) / period).clamp(0.0, 1.0),
                    queued: r
                        .queue
                        .iter_by_age()
                        .into_iter()
                        .map(|q| QueuedEntry {
                            request: q.request,
                            enqueued_at: q.enqueued_at,
                        })
                        .collect(),
                    inbound: r.inbound,
                })
                .collect();
            if loads.len() < 2 {
                continue;
            }
            for m in select_migrations(&loads, &cfg) {
                if !self.cluster.replica(m.to).is_ready() {
                    continue;
                }
                if self.cluster.replica_mut(m.from).queue.remove(m.request).is_none() {
                    continue;
                }
                self.cluster.replica_mut(m.to).inbound += 1;
                self.queue.schedule(
                    now + cfg.migration_delay_s,
                    Event::MigrationComplete {
                        request: m.request,
                        from: m.from,
                        to: m.to,
                    },
                )?;
            }
        }
        for r in self.cluster.replicas() {
            self.migration_marks[r.id.0 as usize] = r.busy_total(now);
        }
        for id in 0..self.cluster.replicas().len() {
            self.try_dispatch(ReplicaId(id as u32))?;
        }
        self.queue.schedule(now + period, Event::MigrationCheck)?;
        Ok(())
    }

    fn on_migration_complete(&mut self, request: RequestId, from: ReplicaId, to: ReplicaId) -> Result<(), EngineError> {
        let now = self.now();
        self.cluster.replica_mut(to).inbound -= 1;
        let layer = self.cluster.replica(to).layer;
        let phase = self.requests[request as usize].phase;
        let queued = QueuedRequest {
            request,
            phase,
            enqueued_at: now,
        };
        let outcome = if self.cluster.replica(to).is_ready() {
            self.cluster.replica_mut(to).queue.push(queued);
            self.try_dispatch(to)?;
            "moved"
        } else if self.cluster.replica(from).is_ready() {
            self.cluster.replica_mut(from).queue.push(queued);
            self.try_dispatch(from)?;
            "returned"
        } else {
            let node = self.cluster.replica(to).node;
            self.route(request, layer, Some(node))?;
            "rerouted"
        };
        self.decisions.push(DecisionRecord {
            time_s: now,
            kind: DecisionKind::MigrationComplete,
            layer_id: layer,
            detail: format!("request={request} from={from} to={to} outcome={outcome}"),
        });
        Ok(())
    }

    fn note_topology(&mut self, layer: usize) {
        let count = |s| self.cluster.count(layer, s);
        let change = TopologyChange {
            time: self.now(),
            layer,
            ready: count(ReplicaState::Ready),
            starting: count(ReplicaState::Starting),
            draining: count(ReplicaState::Draining),
        };
        self.topology_log.push(change);
    }

    fn note_memory(&mut self) {
        for (i, n) in self.cluster.nodes().iter().enumerate() {
            let frac = self.cluster.used_memory(i) as f64 / n.capacity_bytes() as f64;
            self.peak_memory_fraction = self.peak_memory_fraction.max(frac);
        }
    }

    fn finish(self) -> RunOutputs {
        let in_system_arrivals = self
            .requests
            .iter()
            .zip(&self.admitted_mask)
            .filter(|(r, &admitted)| admitted && r.phase != Phase::Done)
            .map(|(r, _)| r.arrival_time)
            .collect();
        let bottleneck = bottleneck_report(&self.latency_log);
        RunOutputs {
            workload_hash: self.config.workload_hash(),
            duration_s: self.config.duration_s,
            requests: self.records,
            timeseries: self.timeseries,
            samples: self.samples,
            decisions: self.decisions,
            bottleneck,
            latency_log: self.latency_log,
            admitted: self.admitted,
            completed: self.completed,
            in_system_arrivals,
            events_fired: self.queue.events_fired(),
            final_clock: self.queue.now(),
            initial_topology: self.initial_topology,
            final_topology: self.cluster.topology(),
            topology_log: self.topology_log,
            peak_memory_fraction: self.peak_memory_fraction,
            event_log: self.event_log.unwrap_or_default(),
        }
    }
}
