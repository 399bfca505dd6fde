//! Per-layer decomposition of the model: cost model, request state machine,
//! per-replica batching and pipeline traversal.
//!
//! A request walks the layer chain once for prefill and once more for every
//! additional output token. Each layer visit is served by one replica of that
//! layer as part of a batch whose members all share a phase.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub type RequestId = u64;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum PipelineError {
    #[error("expected a {expected:?} batch, got {actual:?}")]
    PhaseMismatch { expected: Phase, actual: Phase },
    #[error("request {request} is inconsistent with completion of layer {layer}: {reason}")]
    InconsistentPipelineState {
        request: RequestId,
        layer: usize,
        reason: &'static str,
    },
    #[error("invalid model: {0}")]
    InvalidModel(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Prefill,
    Decode,
    Done,
}

/// Cost coefficients of one layer-service on reference hardware.
///
/// Prefill batch time is `alpha + beta * sum(L) + gamma * sum(L^2)` over the
/// member input lengths; decode step time is `alpha + delta * B + mu * sum(ctx)`
/// over the batch size and member context lengths. Both are divided by the
/// node's compute scale.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CostParams {
    #[serde(default)]
    pub alpha: f64,
    #[serde(default)]
    pub beta: f64,
    #[serde(default)]
    pub gamma: f64,
    #[serde(default)]
    pub delta: f64,
    #[serde(default)]
    pub mu: f64,
    #[serde(default)]
    pub memory_bytes: u64,
}

impl CostParams {
    pub fn validate(&self) -> Result<(), String> {
        let coeffs = [
            ("alpha", self.alpha),
            ("beta", self.beta),
            ("gamma", self.gamma),
            ("delta", self.delta),
            ("mu", self.mu),
        ];
        for (name, v) in coeffs {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(format!("{name} must be a finite value >= 0, got {v}"));
            }
        }
        if self.beta <= 0.0 && self.delta <= 0.0 {
            return Err("at least one of beta and delta must be > 0".into());
        }
        Ok(())
    }
}

/// The model as a chain of layer-services.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelSpec {
    pub num_layers: usize,
    /// Activation width; one token of activations is `hidden_dim * 2` bytes.
    pub hidden_dim: u64,
    pub costs: Vec<CostParams>,
}

impl ModelSpec {
    pub fn new(hidden_dim: u64, costs: Vec<CostParams>) -> Result<Self, PipelineError> {
        if costs.is_empty() {
            return Err(PipelineError::InvalidModel("num_layers must be >= 1".into()));
        }
        for (layer, c) in costs.iter().enumerate() {
            c.validate()
                .map_err(|e| PipelineError::InvalidModel(format!("layer {layer}: {e}")))?;
        }
        Ok(Self {
            num_layers: costs.len(),
            hidden_dim,
            costs,
        })
    }

    /// Bytes of half-precision activations carried between layers.
    pub fn transfer_bytes(&self, tokens: u64) -> u64 {
        self.hidden_dim * tokens * 2
    }
}

/// Token counts of the members of one batch: input lengths for prefill,
/// context lengths (`input_len + tokens_emitted`) for decode.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchWork {
    pub phase: Phase,
    pub tokens: Vec<u64>,
}

impl BatchWork {
    pub fn size(&self) -> usize {
        self.tokens.len()
    }
}

pub fn prefill_time(params: &CostParams, work: &BatchWork, compute_scale: f64) -> Result<f64, PipelineError> {
    if work.phase != Phase::Prefill {
        return Err(PipelineError::PhaseMismatch {
            expected: Phase::Prefill,
            actual: work.phase,
        });
    }
    let (sum, sum_sq) = work.tokens.iter().fold((0.0, 0.0), |(s, s2), &l| {
        let l = l as f64;
        (s + l, s2 + l * l)
    });
    Ok((params.alpha + params.beta * sum + params.gamma * sum_sq) / compute_scale)
}

pub fn decode_step_time(params: &CostParams, work: &BatchWork, compute_scale: f64) -> Result<f64, PipelineError> {
    if work.phase != Phase::Decode {
        return Err(PipelineError::PhaseMismatch {
            expected: Phase::Decode,
            actual: work.phase,
        });
    }
    let contexts: f64 = work.tokens.iter().map(|&c| c as f64).sum();
    let batch = work.size() as f64;
    Ok((params.alpha + params.delta * batch + params.mu * contexts) / compute_scale)
}

/// Service time of a batch under the cost model, dispatching on its phase.
pub fn service_time(params: &CostParams, work: &BatchWork, compute_scale: f64) -> Result<f64, PipelineError> {
    match work.phase {
        Phase::Prefill => prefill_time(params, work, compute_scale),
        Phase::Decode => decode_step_time(params, work, compute_scale),
        Phase::Done => Err(PipelineError::PhaseMismatch {
            expected: Phase::Decode,
            actual: Phase::Done,
        }),
    }
}

/// One inference job and its progress through the layer chain.
#[derive(Debug, Clone, PartialEq)]
pub struct Request {
    pub id: RequestId,
    pub arrival_time: f64,
    pub input_len: u32,
    pub output_len: u32,
    pub tokens_emitted: u32,
    pub phase: Phase,
    pub next_layer: usize,
    /// Largest queue-inclusive latency seen at each layer.
    pub layer_max_latency: Vec<f64>,
    /// Number of layer visits completed so far.
    pub layer_visits: u64,
    pub ttft: Option<f64>,
    pub finish_time: Option<f64>,
}

impl Request {
    pub fn new(id: RequestId, arrival_time: f64, input_len: u32, output_len: u32, num_layers: usize) -> Self {
        Self {
            id,
            arrival_time,
            input_len,
            output_len: output_len.max(1),
            tokens_emitted: 0,
            phase: Phase::Prefill,
            next_layer: 0,
            layer_max_latency: vec![0.0; num_layers],
            layer_visits: 0,
            ttft: None,
            finish_time: None,
        }
    }

    /// Tokens whose activations travel with this request between layers.
    pub fn transfer_tokens(&self) -> u64 {
        match self.phase {
            Phase::Prefill => u64::from(self.input_len),
            _ => 1,
        }
    }

    /// Token count this request contributes to a batch at its current phase.
    pub fn work_tokens(&self) -> u64 {
        match self.phase {
            Phase::Prefill => u64::from(self.input_len),
            _ => u64::from(self.input_len) + u64::from(self.tokens_emitted),
        }
    }

    pub fn record_layer_latency(&mut self, layer: usize, latency: f64) {
        let slot = &mut self.layer_max_latency[layer];
        if latency > *slot {
            *slot = latency;
        }
        self.layer_visits += 1;
    }

    pub fn e2e_latency(&self) -> Option<f64> {
        self.finish_time.map(|f| f - self.arrival_time)
    }

    /// Mean time per output token after the first; zero for single-token outputs.
    pub fn mean_tpot(&self) -> Option<f64> {
        let (ttft, e2e) = (self.ttft?, self.e2e_latency()?);
        if self.output_len <= 1 {
            Some(0.0)
        } else {
            Some((e2e - ttft) / f64::from(self.output_len - 1))
        }
    }
}

/// What happens to a request after it leaves a layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RoutingAction {
    /// Continue to the given layer in the same pass.
    Forward(usize),
    /// A token was emitted; the request starts another pass at layer 0.
    TokenReenter,
    /// The final token was emitted; the request is done.
    Finished,
}

/// Advances `request` past `completed_layer`.
pub fn advance_request(
    request: &mut Request,
    completed_layer: usize,
    num_layers: usize,
    now: f64,
) -> Result<RoutingAction, PipelineError> {
    let inconsistent = |reason| PipelineError::InconsistentPipelineState {
        request: request.id,
        layer: completed_layer,
        reason,
    };
    if request.phase == Phase::Done {
        return Err(inconsistent("request already finished"));
    }
    if request.next_layer != completed_layer || completed_layer >= num_layers {
        return Err(inconsistent("layer is not the request's next layer"));
    }
    if completed_layer + 1 < num_layers {
        request.next_layer = completed_layer + 1;
        return Ok(RoutingAction::Forward(completed_layer + 1));
    }
    match request.phase {
        Phase::Prefill => {
            request.ttft = Some(now - request.arrival_time);
            request.tokens_emitted = 1;
            request.phase = Phase::Decode;
        }
        Phase::Decode => request.tokens_emitted += 1,
        Phase::Done => unreachable!(),
    }
    if request.tokens_emitted >= request.output_len {
        request.phase = Phase::Done;
        request.finish_time = Some(now);
        Ok(RoutingAction::Finished)
    } else {
        request.next_layer = 0;
        Ok(RoutingAction::TokenReenter)
    }
}

/// Batching trigger: dispatch when `max_size` same-phase requests are queued
/// or the oldest has waited `max_wait_s`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BatchPolicy {
    pub max_size: usize,
    pub max_wait_s: f64,
}

impl Default for BatchPolicy {
    fn default() -> Self {
        Self {
            max_size: 62,
            max_wait_s: 0.005,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QueuedRequest {
    pub request: RequestId,
    pub phase: Phase,
    pub enqueued_at: f64,
}

/// FIFO of waiting requests at one replica, kept as one lane per phase so
/// same-phase batches can be cut from the front.
#[derive(Debug, Clone, Default)]
pub struct ReplicaQueue {
    prefill: VecDeque<QueuedRequest>,
    decode: VecDeque<QueuedRequest>,
}

impl ReplicaQueue {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.prefill.len() + self.decode.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn lane_mut(&mut self, phase: Phase) -> &mut VecDeque<QueuedRequest> {
        match phase {
            Phase::Prefill => &mut self.prefill,
            _ => &mut self.decode,
        }
    }

    pub fn push(&mut self, item: QueuedRequest) {
        self.lane_mut(item.phase).push_back(item);
    }

    /// All waiting requests, oldest first.
    pub fn iter_by_age(&self) -> Vec<QueuedRequest> {
        let mut all: Vec<_> = self.prefill.iter().chain(self.decode.iter()).copied().collect();
        all.sort_by(|a, b| a.enqueued_at.total_cmp(&b.enqueued_at).then(a.request.cmp(&b.request)));
        all
    }

    /// Removes a specific request, if queued here.
    pub fn remove(&mut self, request: RequestId) -> Option<QueuedRequest> {
        for lane in [&mut self.prefill, &mut self.decode] {
            if let Some(pos) = lane.iter().position(|q| q.request == request) {
                return lane.remove(pos);
            }
        }
        None
    }

    /// Empties the queue, returning its contents oldest first.
    pub fn drain_all(&mut self) -> Vec<QueuedRequest> {
        let all = self.iter_by_age();
        self.prefill.clear();
        self.decode.clear();
        all
    }

    fn oldest(&self) -> Option<f64> {
        [self.prefill.front(), self.decode.front()]
            .into_iter()
            .flatten()
            .map(|q| q.enqueued_at)
            .min_by(f64::total_cmp)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum BatchDecision {
    /// Dispatch these requests (oldest first) as one batch.
    Dispatch { phase: Phase, members: Vec<QueuedRequest> },
    /// Nothing is ready; re-check at this time.
    WaitUntil(f64),
    Empty,
}

/// Cuts the next batch from `queue` under `policy` at time `now`.
///
/// A lane is dispatchable when it holds at least `max_size` requests or its
/// head has waited `max_wait_s`; among dispatchable lanes the one with the
/// older head wins.
pub fn form_batch(queue: &mut ReplicaQueue, policy: &BatchPolicy, now: f64) -> BatchDecision {
    let max_size = policy.max_size.max(1);
    let mut best: Option<(Phase, f64)> = None;
    for phase in [Phase::Prefill, Phase::Decode] {
        let lane = queue.lane_mut(phase);
        let Some(head) = lane.front() else { continue };
        // Same expression as the WaitUntil deadline, so a timer firing at that
        // deadline always finds the lane ready.
        let ready = lane.len() >= max_size || head.enqueued_at + policy.max_wait_s <= now;
        if ready && best.is_none_or(|(_, t)| head.enqueued_at < t) {
            best = Some((phase, head.enqueued_at));
        }
    }
    match best {
        Some((phase, _)) => {
            let lane = queue.lane_mut(phase);
            let n = lane.len().min(max_size);
            BatchDecision::Dispatch {
                phase,
                members: lane.drain(..n).collect(),
            }
        }
        None => match queue.oldest() {
            Some(t) => BatchDecision::WaitUntil(t + policy.max_wait_s),
            None => BatchDecision::Empty,
        },
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn prefill(lens: &[u64]) -> BatchWork {
        BatchWork {
            phase: Phase::Prefill,
            tokens: lens.to_vec(),
        }
    }

    fn decode(ctx: &[u64]) -> BatchWork {
        BatchWork {
            phase: Phase::Decode,
            tokens: ctx.to_vec(),
        }
    }

    fn close(a: f64, b: f64) -> bool {
        (a - b).abs() <= 1e-15 + 1e-12 * b.abs()
    }

    #[test]
    fn prefill_cost_examples() {
        let linear = CostParams {
            beta: 1e-4,
            ..Default::default()
        };
        assert!(close(prefill_time(&linear, &prefill(&[100]), 1.0).unwrap(), 0.01));

        let with_overhead = CostParams {
            alpha: 1e-3,
            beta: 2e-5,
            ..Default::default()
        };
        assert!(close(prefill_time(&with_overhead, &prefill(&[500]), 1.0).unwrap(), 0.011));

        let quadratic = CostParams {
            gamma: 1e-8,
            ..Default::default()
        };
        assert!(close(prefill_time(&quadratic, &prefill(&[1000, 1000]), 1.0).unwrap(), 0.02));

        // compute_scale divides the whole expression
        assert!(close(prefill_time(&linear, &prefill(&[100]), 2.0).unwrap(), 0.005));
    }

    #[test]
    fn decode_cost_examples() {
        let per_request = CostParams {
            delta: 1e-4,
            ..Default::default()
        };
        assert!(close(decode_step_time(&per_request, &decode(&[1, 1, 1, 1]), 1.0).unwrap(), 4e-4));

        let bandwidth = CostParams {
            mu: 1e-7,
            ..Default::default()
        };
        assert!(close(decode_step_time(&bandwidth, &decode(&[1000, 1000, 2000]), 1.0).unwrap(), 4e-4));

        assert_eq!(decode_step_time(&CostParams::default(), &decode(&[10, 20]), 1.0).unwrap(), 0.0);
    }

    #[test]
    fn phase_mismatch_is_rejected() {
        let p = CostParams::default();
        assert!(matches!(
            prefill_time(&p, &decode(&[1]), 1.0),
            Err(PipelineError::PhaseMismatch { .. })
        ));
        assert!(matches!(
            decode_step_time(&p, &prefill(&[1]), 1.0),
            Err(PipelineError::PhaseMismatch { .. })
        ));
    }

    #[test]
    fn model_requires_layers_and_valid_costs() {
        assert!(ModelSpec::new(8, vec![]).is_err());
        assert!(ModelSpec::new(8, vec![CostParams::default()]).is_err());
        let ok = CostParams {
            beta: 1e-5,
            ..Default::default()
        };
        let neg = CostParams { alpha: -1.0, ..ok };
        assert!(ModelSpec::new(8, vec![ok, neg]).is_err());
        let m = ModelSpec::new(5120, vec![ok; 40]).unwrap();
        assert_eq!(m.num_layers, 40);
        assert_eq!(m.transfer_bytes(3), 5120 * 3 * 2);
    }

    fn run_passes(req: &mut Request, num_layers: usize) -> (usize, RoutingAction) {
        let mut visits = 0;
        let mut t = 0.0;
        loop {
            let layer = req.next_layer;
            t += 1.0;
            visits += 1;
            match advance_request(req, layer, num_layers, t).unwrap() {
                RoutingAction::Finished => return (visits, RoutingAction::Finished),
                _ => continue,
            }
        }
    }

    #[test]
    fn single_token_output_finishes_after_prefill() {
        let mut r = Request::new(0, 0.0, 100, 1, 4);
        let (visits, _) = run_passes(&mut r, 4);
        assert_eq!(visits, 4);
        assert_eq!(r.phase, Phase::Done);
        assert_eq!(r.ttft, r.e2e_latency());
        assert_eq!(r.mean_tpot(), Some(0.0));
    }

    #[test]
    fn output_len_three_traverses_three_times() {
        let mut r = Request::new(0, 0.0, 100, 3, 5);
        let (visits, _) = run_passes(&mut r, 5);
        assert_eq!(visits, 15);
        assert_eq!(r.tokens_emitted, 3);
        assert_eq!(r.ttft, Some(5.0));
        assert_eq!(r.finish_time, Some(15.0));
        assert_eq!(r.mean_tpot(), Some(5.0));
    }

    #[test]
    fn last_decode_step_terminates() {
        let mut r = Request::new(7, 0.0, 10, 5, 40);
        r.phase = Phase::Decode;
        r.tokens_emitted = 4;
        r.next_layer = 39;
        assert_eq!(advance_request(&mut r, 39, 40, 3.0).unwrap(), RoutingAction::Finished);
        assert_eq!(r.phase, Phase::Done);
        assert!(advance_request(&mut r, 0, 40, 3.0).is_err());
    }

    #[test]
    fn wrong_layer_is_inconsistent() {
        let mut r = Request::new(1, 0.0, 10, 5, 40);
        assert!(matches!(
            advance_request(&mut r, 3, 40, 1.0),
            Err(PipelineError::InconsistentPipelineState { .. })
        ));
    }

    fn queued(id: RequestId, phase: Phase, t: f64) -> QueuedRequest {
        QueuedRequest {
            request: id,
            phase,
            enqueued_at: t,
        }
    }

    #[test]
    fn full_batch_dispatches_immediately() {
        let mut q = ReplicaQueue::new();
        for i in 0..62 {
            q.push(queued(i, Phase::Decode, 0.0));
        }
        let policy = BatchPolicy {
            max_size: 62,
            max_wait_s: 1.0,
        };
        match form_batch(&mut q, &policy, 0.0) {
            BatchDecision::Dispatch { phase, members } => {
                assert_eq!(phase, Phase::Decode);
                assert_eq!(members.len(), 62);
            }
            other => panic!("unexpected {other:?}"),
        }
        assert!(q.is_empty());
    }

    #[test]
    fn partial_batch_waits_then_times_out() {
        let mut q = ReplicaQueue::new();
        for i in 0..10 {
            q.push(queued(i, Phase::Prefill, 1.0 + i as f64 * 0.001));
        }
        let policy = BatchPolicy {
            max_size: 62,
            max_wait_s: 0.5,
        };
        assert_eq!(form_batch(&mut q, &policy, 1.2), BatchDecision::WaitUntil(1.5));
        match form_batch(&mut q, &policy, 1.5) {
            BatchDecision::Dispatch { members, .. } => assert_eq!(members.len(), 10),
            other => panic!("unexpected {other:?}"),
        }
        assert_eq!(form_batch(&mut q, &policy, 2.0), BatchDecision::Empty);
    }

    #[test]
    fn batches_never_mix_phases_and_prefer_the_oldest_lane() {
        let mut q = ReplicaQueue::new();
        q.push(queued(1, Phase::Decode, 0.0));
        q.push(queued(2, Phase::Prefill, 0.1));
        q.push(queued(3, Phase::Decode, 0.2));
        let policy = BatchPolicy {
            max_size: 4,
            max_wait_s: 0.0,
        };
        match form_batch(&mut q, &policy, 0.3) {
            BatchDecision::Dispatch { phase, members } => {
                assert_eq!(phase, Phase::Decode);
                assert_eq!(members.iter().map(|m| m.request).collect::<Vec<_>>(), vec![1, 3]);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn full_younger_lane_is_not_blocked_by_older_partial_lane() {
        let mut q = ReplicaQueue::new();
        q.push(queued(100, Phase::Prefill, 0.0));
        for i in 0..3 {
            q.push(queued(i, Phase::Decode, 0.5));
        }
        let policy = BatchPolicy {
            max_size: 3,
            max_wait_s: 10.0,
        };
        match form_batch(&mut q, &policy, 0.6) {
            BatchDecision::Dispatch { phase, members } => {
                assert_eq!(phase, Phase::Decode);
                assert_eq!(members.len(), 3);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn remove_and_drain_keep_age_order() {
        let mut q = ReplicaQueue::new();
        q.push(queued(1, Phase::Decode, 0.3));
        q.push(queued(2, Phase::Prefill, 0.1));
        q.push(queued(3, Phase::Decode, 0.2));
        assert_eq!(q.remove(3).map(|x| x.request), Some(3));
        assert!(q.remove(3).is_none());
        let drained: Vec<_> = q.drain_all().into_iter().map(|x| x.request).collect();
        assert_eq!(drained, vec![2, 1]);
        assert!(q.is_empty());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn params() -> impl Strategy<Value = CostParams> {
            (0.0..1e-2f64, 0.0..1e-4f64, 0.0..1e-8f64, 0.0..1e-3f64, 0.0..1e-6f64).prop_map(
                |(alpha, beta, gamma, delta, mu)| CostParams {
                    alpha,
                    beta,
                    gamma,
                    delta,
                    mu,
                    memory_bytes: 0,
                },
            )
        }

        proptest! {
            #[test]
            fn service_time_is_monotone(
                p in params(),
                tokens in prop::collection::vec(1u64..4096, 1..64),
                extra in 1u64..512,
                idx in any::<prop::sample::Index>(),
                bump in 0.0..1e-3f64,
            ) {
                for phase in [Phase::Prefill, Phase::Decode] {
                    let base = BatchWork { phase, tokens: tokens.clone() };
                    let t0 = service_time(&p, &base, 1.0).unwrap();

                    let mut longer = base.clone();
                    longer.tokens[idx.index(tokens.len())] += extra;
                    prop_assert!(service_time(&p, &longer, 1.0).unwrap() >= t0);

                    let mut bigger = base.clone();
                    bigger.tokens.push(extra);
                    prop_assert!(service_time(&p, &bigger, 1.0).unwrap() >= t0);

                    for q in [
                        CostParams { alpha: p.alpha + bump, ..p },
                        CostParams { beta: p.beta + bump, ..p },
                        CostParams { gamma: p.gamma + bump, ..p },
                        CostParams { delta: p.delta + bump, ..p },
                        CostParams { mu: p.mu + bump, ..p },
                    ] {
                        prop_assert!(service_time(&q, &base, 1.0).unwrap() >= t0);
                    }
                }
            }

            #[test]
            fn batches_respect_size_and_phase(
                items in prop::collection::vec((any::<bool>(), 0.0..10.0f64), 0..200),
                max_size in 1usize..70,
                now in 0.0..20.0f64,
            ) {
                let mut q = ReplicaQueue::new();
                let mut sorted = items.clone();
                sorted.sort_by(|a, b| a.1.total_cmp(&b.1));
                for (i, (is_prefill, t)) in sorted.iter().enumerate() {
                    let phase = if *is_prefill { Phase::Prefill } else { Phase::Decode };
                    q.push(queued(i as u64, phase, *t));
                }
                let before = q.len();
                let policy = BatchPolicy { max_size, max_wait_s: 1.0 };
                if let BatchDecision::Dispatch { phase, members } = form_batch(&mut q, &policy, now) {
                    prop_assert!(!members.is_empty() && members.len() <= max_size);
                    prop_assert!(members.iter().all(|m| m.phase == phase));
                    prop_assert_eq!(q.len() + members.len(), before);
                }
            }
        }
    }
}
