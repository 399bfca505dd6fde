#![allow(dead_code)]

use std::path::PathBuf;

use layerserve::balancer::BalancerKind;
use layerserve::engine::{ExponentialService, RunOutputs, SimOptions, Simulation};
use layerserve::scenario::{Placement, ScenarioConfig};
use layerserve::workload::{ArrivalProcess, RatePhase};
use proptest::prelude::*;

pub fn scenarios_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../scenarios")
}

pub fn shipped(name: &str) -> PathBuf {
    scenarios_dir().join(name)
}

/// A small open-loop scenario: `num_layers` cheap layers over `nodes` nodes.
pub fn small_scenario(num_layers: usize, nodes: usize) -> ScenarioConfig {
    // 1 GB per layer replica, with room for a few more per node.
    let memory = 1_000_000_000u64 * (num_layers.div_ceil(nodes) as u64 + 6).max(10);
    let cluster: Vec<serde_json::Value> = (0..nodes)
        .map(|i| {
            serde_json::json!({
                "node_id": format!("n{i}"),
                "gpu_count": 1,
                "gpu_memory_bytes": memory,
                "net_latency_s": 0.0002,
                "net_bandwidth_bps": 1.25e9
            })
        })
        .collect();
    let doc = serde_json::json!({
        "name": "small",
        "seed": 1,
        "duration_s": 60.0,
        "cluster": cluster,
        "model": {
            "num_layers": num_layers,
            "hidden_dim": 1024,
            "startup_delay_s": 2.0,
            "default_cost": {"alpha": 0.0005, "beta": 1e-6, "delta": 1e-4, "mu": 1e-8, "memory_bytes": 1_000_000_000u64}
        },
        "workload": {
            "arrival": {"kind": "poisson", "rate": 5.0},
            "input_len": {"kind": "uniform_int", "lo": 16, "hi": 256},
            "output_len": {"kind": "uniform_int", "lo": 1, "hi": 8}
        },
        "batching": {"max_size": 8, "max_wait_s": 0.002}
    });
    let config = ScenarioConfig::from_json_str(&doc.to_string()).expect("scenario parses");
    config.validate().expect("scenario validates");
    config
}

/// One layer, one replica, FIFO, no batching: an M/M/1 queue once the
/// exponential service hook is installed.
pub fn mm1_scenario(lambda: f64, duration_s: f64, seed: u64) -> ScenarioConfig {
    let mut c = small_scenario(1, 1);
    c.name = "mm1".into();
    c.seed = seed;
    c.duration_s = duration_s;
    c.sampling_interval_s = 10.0;
    c.workload = serde_json::from_value(serde_json::json!({
        "arrival": {"kind": "poisson", "rate": lambda},
        "input_len": {"kind": "deterministic", "value": 1},
        "output_len": {"kind": "deterministic", "value": 1}
    }))
    .unwrap();
    c.batching.max_size = 1;
    c.batching.max_wait_s = 0.0;
    c.validate().unwrap();
    c
}

pub fn run_mm1(lambda: f64, mu: f64, duration_s: f64, seed: u64) -> RunOutputs {
    let options = SimOptions {
        service_hook: Some(Box::new(ExponentialService { rate: mu })),
        ..Default::default()
    };
    Simulation::new(mm1_scenario(lambda, duration_s, seed), options)
        .unwrap()
        .run()
        .unwrap()
}

/// 40 layers over three nodes with a fixed topology; arrivals stop at
/// `arrivals_until` so the system can empty before `duration_s`.
pub fn littles_law_scenario(seed: u64) -> ScenarioConfig {
    let mut c = small_scenario(40, 3);
    c.name = "littles_law".into();
    c.seed = seed;
    c.duration_s = 2000.0;
    c.sampling_interval_s = 0.1;
    c.workload = serde_json::from_value(serde_json::json!({
        "arrival": {"kind": "poisson", "rate": 4.0},
        "input_len": {"kind": "uniform_int", "lo": 16, "hi": 512},
        "output_len": {"kind": "uniform_int", "lo": 4, "hi": 16},
        "duration_s": 1800.0
    }))
    .unwrap();
    c.validate().unwrap();
    c
}

pub fn run(config: ScenarioConfig) -> RunOutputs {
    Simulation::new(config, SimOptions::default()).unwrap().run().unwrap()
}

pub fn run_logged(config: ScenarioConfig) -> RunOutputs {
    let options = SimOptions {
        record_events: true,
        ..Default::default()
    };
    Simulation::new(config, options).unwrap().run().unwrap()
}

/// Time-average requests in system over `[from, to)` from the per-tick
/// arrival and completion counters.
pub fn sampled_in_system(outputs: &RunOutputs, from: f64, to: f64) -> f64 {
    let mut n: i64 = 0;
    let (mut sum, mut count) = (0.0, 0usize);
    for s in &outputs.samples {
        n += s.arrivals as i64 - s.completions as i64;
        if s.time > from && s.time <= to {
            sum += n as f64;
            count += 1;
        }
    }
    sum / count as f64
}

fn ensure(ok: bool, msg: impl Into<String>) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg.into())
    }
}

/// Conservation, ordering and bounds every run must satisfy.
pub fn check_invariants(c: &ScenarioConfig, out: &RunOutputs) -> Result<(), String> {
    ensure(
        out.admitted == out.completed + out.in_system_arrivals.len() as u64,
        format!("admitted {} != completed {} + in system {}", out.admitted, out.completed, out.in_system_arrivals.len()),
    )?;
    ensure(out.completed == out.requests.len() as u64, "completion count disagrees with records")?;
    for w in out.event_log.windows(2) {
        let ordered = w[0].time < w[1].time || (w[0].time == w[1].time && w[0].sequence < w[1].sequence);
        ensure(ordered, format!("{:?} fired before {:?}", w[0], w[1]))?;
    }
    ensure(out.event_log.last().is_none_or(|e| e.time <= c.duration_s), "event after the horizon")?;
    for row in &out.timeseries {
        ensure((0.0..=1.0).contains(&row.utilization), format!("{row:?}"))?;
    }
    ensure(out.peak_memory_fraction <= 1.0, "node memory over capacity")?;
    for t in &out.topology_log {
        ensure(t.ready >= 1, format!("layer {} lost its last ready replica at {}", t.layer, t.time))?;
        if c.autoscaler.enabled && c.autoscaler.applies_to(t.layer) {
            ensure(t.ready + t.starting <= c.autoscaler.max_replicas, format!("{t:?}"))?;
        }
    }
    for r in &out.requests {
        ensure(r.ttft_s > 0.0 && r.ttft_s <= r.e2e_s, format!("{r:?}"))?;
        ensure(r.arrival_time_s + r.e2e_s <= c.duration_s + 1e-9, format!("{r:?} finished after the horizon"))?;
    }
    Ok(())
}

prop_compose! {
    pub fn dynamic_scenario()(
        seed in any::<u64>(),
        num_layers in 2usize..6,
        nodes in 1usize..4,
        per_layer in 1usize..3,
        rate in 2.0..40.0f64,
        burst in 1.0..6.0f64,
        max_size in 1usize..16,
        sync in 1.0..5.0f64,
        startup in 0.0..3.0f64,
        target in 0.2..0.9f64,
        hot in 0.3..0.9f64,
        delay in 0.0..0.2f64,
        balancer in prop::sample::select(vec![
            BalancerKind::RoundRobin,
            BalancerKind::LeastOutstanding,
            BalancerKind::WeightedLeastUtilization,
        ]),
        closed in any::<bool>(),
    ) -> ScenarioConfig {
        let mut c = small_scenario(num_layers, nodes);
        c.seed = seed;
        c.duration_s = 40.0;
        c.placement = Placement::RoundRobin { replicas_per_layer: per_layer };
        c.model.default_cost.delta = 2e-3;
        c.model.startup_delay_s = startup;
        c.batching.max_size = max_size;
        c.balancer.policy = balancer;
        c.workload.arrival = if closed {
            ArrivalProcess::ClosedLoop { concurrency: (rate as usize).max(1) }
        } else {
            ArrivalProcess::Poisson { rate }
        };
        c.workload.phases = vec![
            RatePhase { start_s: 0.0, rate_multiplier: 1.0 },
            RatePhase { start_s: 10.0, rate_multiplier: burst },
            RatePhase { start_s: 20.0, rate_multiplier: 1.0 },
        ];
        c.autoscaler.enabled = true;
        c.autoscaler.sync_period_s = sync;
        c.autoscaler.target_utilization = target;
        c.autoscaler.max_replicas = 4;
        c.autoscaler.scale_down_stabilization_s = 3.0;
        c.migration.enabled = true;
        c.migration.hot_threshold = hot;
        c.migration.cold_threshold = hot / 3.0;
        c.migration.migration_delay_s = delay;
        c.migration.check_period_s = 0.5;
        c.validate().unwrap();
        c
    }
}
