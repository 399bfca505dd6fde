//! Request streams: Poisson arrivals with phase-modulated rates, a
//! closed-loop user pool, and trace replay.
//!
//! Trace files are UTF-8 CSV with the header
//! `arrival_time_s,input_tokens,output_tokens` and non-decreasing times.

use std::io::Read;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::sim::{Distribution, RandomStream, SimError};

#[derive(Debug, Error)]
pub enum WorkloadError {
    #[error("invalid workload: {0}")]
    InvalidSpec(String),
    #[error("malformed trace at line {line}: {reason}")]
    MalformedTrace { line: u64, reason: String },
    #[error("trace timestamps decrease at line {line}")]
    NonMonotonicTimestamps { line: u64 },
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Sampling(#[from] SimError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ArrivalProcess {
    Poisson { rate: f64 },
    ClosedLoop { concurrency: usize },
    Trace { file: PathBuf },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum LengthDist {
    UniformInt { lo: u32, hi: u32 },
    Deterministic { value: u32 },
    /// File of token counts, one per line; `#` starts a comment.
    Empirical { file: PathBuf },
}

/// From `start_s` on, the Poisson rate is multiplied by `rate_multiplier`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RatePhase {
    pub start_s: f64,
    pub rate_multiplier: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorkloadSpec {
    pub arrival: ArrivalProcess,
    pub input_len: LengthDist,
    pub output_len: LengthDist,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub phases: Vec<RatePhase>,
    /// Arrivals are generated over `[0, duration_s)`; defaults to the
    /// scenario duration.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub duration_s: Option<f64>,
}

impl WorkloadSpec {
    pub fn validate(&self) -> Result<(), WorkloadError> {
        let bad = |m: String| Err(WorkloadError::InvalidSpec(m));
        match &self.arrival {
            ArrivalProcess::Poisson { rate } if !(*rate > 0.0 && rate.is_finite()) => {
                return bad(format!("arrival.rate must be > 0, got {rate}"));
            }
            ArrivalProcess::ClosedLoop { concurrency: 0 } => {
                return bad("arrival.concurrency must be >= 1".into());
            }
            _ => {}
        }
        for (name, d) in [("input_len", &self.input_len), ("output_len", &self.output_len)] {
            match d {
                LengthDist::UniformInt { lo, hi } if lo > hi || *lo == 0 => {
                    return bad(format!("{name}: uniform_int requires 1 <= lo <= hi"));
                }
                LengthDist::Deterministic { value: 0 } => return bad(format!("{name}: value must be >= 1")),
                _ => {}
            }
        }
        for w in self.phases.windows(2) {
            if w[1].start_s <= w[0].start_s {
                return bad("phase start times must be strictly increasing".into());
            }
        }
        for p in &self.phases {
            if !(p.rate_multiplier > 0.0 && p.rate_multiplier.is_finite()) || p.start_s < 0.0 {
                return bad("phase multipliers must be > 0 and starts >= 0".into());
            }
        }
        if let Some(d) = self.duration_s {
            if !(d > 0.0 && d.is_finite()) {
                return bad("duration_s must be > 0".into());
            }
        }
        Ok(())
    }

    /// Rate multiplier in force at time `t`.
    pub fn multiplier_at(&self, t: f64) -> f64 {
        self.phases
            .iter()
            .take_while(|p| p.start_s <= t)
            .last()
            .map_or(1.0, |p| p.rate_multiplier)
    }
}

/// One request entering the system.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Arrival {
    pub time: f64,
    pub input_len: u32,
    pub output_len: u32,
}

/// The three independent random streams a workload consumes.
#[derive(Debug, Clone)]
pub struct WorkloadStreams {
    pub arrivals: RandomStream,
    pub input_len: RandomStream,
    pub output_len: RandomStream,
}

impl WorkloadStreams {
    pub fn new(seed: u64) -> Self {
        Self {
            arrivals: RandomStream::new(seed, "arrivals"),
            input_len: RandomStream::new(seed, "input_len"),
            output_len: RandomStream::new(seed, "output_len"),
        }
    }
}

/// A length distribution with any file-backed values loaded.
#[derive(Debug, Clone, PartialEq)]
pub enum LengthSampler {
    Dist(Distribution),
    Empirical(Vec<u32>),
}

impl LengthSampler {
    pub fn resolve(dist: &LengthDist, base_dir: &Path) -> Result<Self, WorkloadError> {
        Ok(match dist {
            LengthDist::UniformInt { lo, hi } => LengthSampler::Dist(Distribution::UniformInt {
                lo: u64::from(*lo),
                hi: u64::from(*hi),
            }),
            LengthDist::Deterministic { value } => LengthSampler::Dist(Distribution::Deterministic {
                value: f64::from(*value),
            }),
            LengthDist::Empirical { file } => {
                let path = base_dir.join(file);
                let text = std::fs::read_to_string(&path).map_err(|source| WorkloadError::Io {
                    path: path.clone(),
                    source,
                })?;
                let values = parse_lengths(&text)?;
                if values.is_empty() {
                    return Err(WorkloadError::InvalidSpec(format!("{} holds no lengths", path.display())));
                }
                LengthSampler::Empirical(values)
            }
        })
    }

    pub fn sample(&self, stream: &mut RandomStream) -> Result<u32, WorkloadError> {
        Ok(match self {
            LengthSampler::Dist(d) => stream.draw(d)? as u32,
            LengthSampler::Empirical(values) => values[stream.index(values.len())],
        })
    }

    /// Smallest and largest value this sampler can produce.
    pub fn support(&self) -> (u32, u32) {
        match self {
            LengthSampler::Dist(Distribution::UniformInt { lo, hi }) => (*lo as u32, *hi as u32),
            LengthSampler::Dist(Distribution::Deterministic { value }) => (*value as u32, *value as u32),
            LengthSampler::Dist(Distribution::Exponential { .. }) => (0, u32::MAX),
            LengthSampler::Empirical(v) => (
                v.iter().copied().min().unwrap_or(0),
                v.iter().copied().max().unwrap_or(0),
            ),
        }
    }
}

fn parse_lengths(text: &str) -> Result<Vec<u32>, WorkloadError> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let v: u32 = line.parse().map_err(|_| WorkloadError::MalformedTrace {
            line: i as u64 + 1,
            reason: format!("expected a token count, got {line:?}"),
        })?;
        if v == 0 {
            return Err(WorkloadError::MalformedTrace {
                line: i as u64 + 1,
                reason: "token counts must be >= 1".into(),
            });
        }
        out.push(v);
    }
    Ok(out)
}

/// Draws request lengths for generated arrivals.
pub struct LengthSource {
    input: LengthSampler,
    output: LengthSampler,
}

impl LengthSource {
    pub fn new(spec: &WorkloadSpec, base_dir: &Path) -> Result<Self, WorkloadError> {
        Ok(Self {
            input: LengthSampler::resolve(&spec.input_len, base_dir)?,
            output: LengthSampler::resolve(&spec.output_len, base_dir)?,
        })
    }

    pub fn input(&self) -> &LengthSampler {
        &self.input
    }

    pub fn draw(&self, streams: &mut WorkloadStreams) -> Result<(u32, u32), WorkloadError> {
        Ok((
            self.input.sample(&mut streams.input_len)?,
            self.output.sample(&mut streams.output_len)?,
        ))
    }
}

/// Open-loop arrival schedule over `[0, horizon)`.
///
/// Poisson inter-arrival times are exponential at `rate * multiplier`; when
/// a draw crosses a phase boundary the process restarts at the boundary with
/// the new rate, which is exact because the exponential is memoryless.
/// Trace workloads are replayed verbatim. Closed-loop workloads have no
/// precomputed schedule and yield an empty list.
pub fn gen_requests(
    spec: &WorkloadSpec,
    horizon: f64,
    streams: &mut WorkloadStreams,
    base_dir: &Path,
) -> Result<Vec<Arrival>, WorkloadError> {
    spec.validate()?;
    let horizon = spec.duration_s.unwrap_or(horizon);
    match &spec.arrival {
        ArrivalProcess::Poisson { rate } => {
            let lengths = LengthSource::new(spec, base_dir)?;
            let mut out = Vec::new();
            let mut t = 0.0;
            loop {
                let mult = spec.multiplier_at(t);
                let gap = streams.arrivals.draw(&Distribution::Exponential { rate: rate * mult })?;
                let next_boundary = spec
                    .phases
                    .iter()
                    .map(|p| p.start_s)
                    .find(|&s| s > t)
                    .unwrap_or(f64::INFINITY);
                if t + gap >= next_boundary {
                    t = next_boundary;
                    if t >= horizon {
                        break;
                    }
                    continue;
                }
                t += gap;
                if t >= horizon {
                    break;
                }
                let (input_len, output_len) = lengths.draw(streams)?;
                out.push(Arrival {
                    time: t,
                    input_len,
                    output_len,
                });
            }
            Ok(out)
        }
        ArrivalProcess::Trace { file } => {
            let path = base_dir.join(file);
            Ok(replay_trace(&path)?.into_iter().filter(|a| a.time < horizon).collect())
        }
        ArrivalProcess::ClosedLoop { .. } => Ok(Vec::new()),
    }
}

#[derive(Debug, Deserialize)]
struct TraceRow {
    arrival_time_s: f64,
    input_tokens: u32,
    output_tokens: u32,
}

pub fn replay_trace(path: &Path) -> Result<Vec<Arrival>, WorkloadError> {
    let file = std::fs::File::open(path).map_err(|source| WorkloadError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    parse_trace(file)
}

pub fn parse_trace<R: Read>(reader: R) -> Result<Vec<Arrival>, WorkloadError> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let headers = rdr.headers().map_err(|e| WorkloadError::MalformedTrace {
        line: 1,
        reason: e.to_string(),
    })?;
    if headers != vec!["arrival_time_s", "input_tokens", "output_tokens"] {
        return Err(WorkloadError::MalformedTrace {
            line: 1,
            reason: format!("expected header arrival_time_s,input_tokens,output_tokens, got {headers:?}"),
        });
    }
    let mut out: Vec<Arrival> = Vec::new();
    for row in rdr.deserialize::<TraceRow>() {
        let row = row.map_err(|e| WorkloadError::MalformedTrace {
            line: e.position().map_or(0, |p| p.line()),
            reason: e.to_string(),
        })?;
        let line = out.len() as u64 + 2;
        if !(row.arrival_time_s >= 0.0 && row.arrival_time_s.is_finite()) {
            return Err(WorkloadError::MalformedTrace {
                line,
                reason: "arrival_time_s must be finite and >= 0".into(),
            });
        }
        if row.input_tokens == 0 || row.output_tokens == 0 {
            return Err(WorkloadError::MalformedTrace {
                line,
                reason: "token counts must be >= 1".into(),
            });
        }
        if out.last().is_some_and(|prev| row.arrival_time_s < prev.time) {
            return Err(WorkloadError::NonMonotonicTimestamps { line });
        }
        out.push(Arrival {
            time: row.arrival_time_s,
            input_len: row.input_tokens,
            output_len: row.output_tokens,
        });
    }
    Ok(out)
}

/// Fixed pool of users: each completion immediately issues the next request.
#[derive(Debug, Clone)]
pub struct ClosedLoopDriver {
    concurrency: usize,
    outstanding: usize,
    horizon: f64,
}

impl ClosedLoopDriver {
    pub fn new(concurrency: usize, horizon: f64) -> Result<Self, WorkloadError> {
        if concurrency == 0 {
            return Err(WorkloadError::InvalidSpec("closed-loop concurrency must be >= 1".into()));
        }
        Ok(Self {
            concurrency,
            outstanding: 0,
            horizon,
        })
    }

    pub fn concurrency(&self) -> usize {
        self.concurrency
    }

    pub fn outstanding(&self) -> usize {
        self.outstanding
    }

    /// Number of requests to issue at start-up.
    pub fn start(&mut self) -> usize {
        let n = self.concurrency - self.outstanding;
        self.outstanding = self.concurrency;
        n
    }

    /// Records a completion at `now`; returns true if a replacement request
    /// should be issued at `now`.
    pub fn on_completion(&mut self, now: f64) -> bool {
        self.outstanding -= 1;
        if now < self.horizon {
            self.outstanding += 1;
            true
        } else {
            false
        }
    }
}
