//! Load forecasting over arrival-rate series.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum PredictorError {
    #[error("cannot forecast from an empty series")]
    EmptySeries,
    #[error("series of {len} samples is too short for warm-up {horizon}")]
    SeriesTooShort { len: usize, horizon: usize },
    #[error("invalid load series: {0}")]
    InvalidSeries(String),
    #[error("invalid forecaster parameter: {0}")]
    InvalidParameter(String),
}

/// Arrival rate observations at increasing times.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct LoadSeries {
    samples: Vec<(f64, f64)>,
}

impl LoadSeries {
    pub fn new(samples: Vec<(f64, f64)>) -> Result<Self, PredictorError> {
        if samples.windows(2).any(|w| w[1].0 <= w[0].0) {
            return Err(PredictorError::InvalidSeries("timestamps must strictly increase".into()));
        }
        if samples.iter().any(|&(_, r)| !(r >= 0.0 && r.is_finite())) {
            return Err(PredictorError::InvalidSeries("rates must be finite and >= 0".into()));
        }
        Ok(Self { samples })
    }

    /// Appends a sample; rejects out-of-order times and negative rates.
    pub fn push(&mut self, time: f64, rate: f64) -> Result<(), PredictorError> {
        if self.samples.last().is_some_and(|&(t, _)| time <= t) {
            return Err(PredictorError::InvalidSeries("timestamps must strictly increase".into()));
        }
        if !(rate >= 0.0 && rate.is_finite()) {
            return Err(PredictorError::InvalidSeries("rates must be finite and >= 0".into()));
        }
        self.samples.push((time, rate));
        Ok(())
    }

    /// Drops all but the newest `keep` samples.
    pub fn truncate_front(&mut self, keep: usize) {
        if self.samples.len() > keep {
            self.samples.drain(..self.samples.len() - keep);
        }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn rates(&self) -> Vec<f64> {
        self.samples.iter().map(|&(_, r)| r).collect()
    }

    pub fn samples(&self) -> &[(f64, f64)] {
        &self.samples
    }
}

/// Averages fine-grained rate samples into buckets of `bucket_s` seconds.
/// Only complete buckets are emitted, stamped with their end time.
pub fn bucketize(samples: &[(f64, f64)], sample_interval_s: f64, bucket_s: f64) -> Vec<(f64, f64)> {
    let per_bucket = ((bucket_s / sample_interval_s).round() as usize).max(1);
    samples
        .chunks_exact(per_bucket)
        .map(|chunk| {
            let mean = chunk.iter().map(|&(_, r)| r).sum::<f64>() / chunk.len() as f64;
            (chunk.last().expect("non-empty chunk").0, mean)
        })
        .collect()
}

pub fn ewma_forecast(values: &[f64], alpha: f64) -> Result<f64, PredictorError> {
    if !(alpha > 0.0 && alpha <= 1.0) {
        return Err(PredictorError::InvalidParameter(format!("alpha must be in (0, 1], got {alpha}")));
    }
    let (&first, rest) = values.split_first().ok_or(PredictorError::EmptySeries)?;
    Ok(rest.iter().fold(first, |s, &x| alpha * x + (1.0 - alpha) * s))
}

pub fn window_mean_forecast(values: &[f64], k: usize) -> Result<f64, PredictorError> {
    if values.is_empty() {
        return Err(PredictorError::EmptySeries);
    }
    let k = k.clamp(1, values.len());
    let tail = &values[values.len() - k..];
    Ok(tail.iter().sum::<f64>() / k as f64)
}

/// A pluggable one-step-ahead forecaster.
pub trait Forecaster {
    fn forecast(&self, values: &[f64]) -> Result<f64, PredictorError>;
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ForecasterConfig {
    Ewma {
        #[serde(default = "default_alpha")]
        alpha: f64,
    },
    WindowMean {
        #[serde(default = "default_k")]
        k: usize,
    },
}

fn default_alpha() -> f64 {
    0.3
}

fn default_k() -> usize {
    10
}

impl Default for ForecasterConfig {
    fn default() -> Self {
        ForecasterConfig::Ewma { alpha: default_alpha() }
    }
}

impl Forecaster for ForecasterConfig {
    fn forecast(&self, values: &[f64]) -> Result<f64, PredictorError> {
        match *self {
            ForecasterConfig::Ewma { alpha } => ewma_forecast(values, alpha),
            ForecasterConfig::WindowMean { k } => window_mean_forecast(values, k),
        }
    }
}

/// Walk-forward one-step mean absolute error: for every index `t` from
/// `max(horizon, 1)` on, forecast `values[t]` from `values[..t]`.
pub fn forecast_error<F: Forecaster + ?Sized>(values: &[f64], forecaster: &F, horizon: usize) -> Result<f64, PredictorError> {
    if values.len() <= horizon {
        return Err(PredictorError::SeriesTooShort {
            len: values.len(),
            horizon,
        });
    }
    let start = horizon.max(1);
    if start >= values.len() {
        return Err(PredictorError::SeriesTooShort {
            len: values.len(),
            horizon,
        });
    }
    let mut total = 0.0;
    for t in start..values.len() {
        total += (values[t] - forecaster.forecast(&values[..t])?).abs();
    }
    Ok(total / (values.len() - start) as f64)
}
