use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum StatsError {
    #[error("no samples")]
    EmptySamples,
    #[error("percentile must be in (0, 1], got {0}")]
    InvalidPercentile(f64),
    #[error("skewness needs at least 3 samples with non-zero variance")]
    DegenerateSample,
}

/// Nearest-rank percentile: the smallest sample `x` such that at least a
/// fraction `p` of the samples are `<= x`.
pub fn percentile(samples: &[f64], p: f64) -> Result<f64, StatsError> {
    if samples.is_empty() {
        return Err(StatsError::EmptySamples);
    }
    if !(p > 0.0 && p <= 1.0) {
        return Err(StatsError::InvalidPercentile(p));
    }
    let rank = nearest_rank(samples.len(), p);
    let mut buf = samples.to_vec();
    let (_, nth, _) = buf.select_nth_unstable_by(rank - 1, f64::total_cmp);
    Ok(*nth)
}

/// 1-based rank `ceil(p * n)`, nudged so it is exactly the smallest `k`
/// with `k / n >= p` even when `p * n` rounds across an integer.
fn nearest_rank(n: usize, p: f64) -> usize {
    let mut rank = ((p * n as f64).ceil() as usize).clamp(1, n);
    while rank > 1 && (rank - 1) as f64 / n as f64 >= p {
        rank -= 1;
    }
    while rank < n && (rank as f64 / n as f64) < p {
        rank += 1;
    }
    rank
}

/// Population-moment skewness `m3 / m2^(3/2)`.
pub fn skewness(samples: &[f64]) -> Result<f64, StatsError> {
    let n = samples.len();
    if n < 3 {
        return Err(StatsError::DegenerateSample);
    }
    let mean = samples.iter().sum::<f64>() / n as f64;
    let (m2, m3) = samples.iter().fold((0.0, 0.0), |(m2, m3), &x| {
        let d = x - mean;
        (m2 + d * d, m3 + d * d * d)
    });
    let (m2, m3) = (m2 / n as f64, m3 / n as f64);
    if m2 <= 0.0 || m2 <= f64::EPSILON * mean * mean {
        return Err(StatsError::DegenerateSample);
    }
    Ok(m3 / m2.powf(1.5))
}

pub fn mean(samples: &[f64]) -> Option<f64> {
    (!samples.is_empty()).then(|| samples.iter().sum::<f64>() / samples.len() as f64)
}

/// Time-average number of jobs in a system over `[from, to)`, given each
/// job's `(arrival, departure)`; jobs still present use `departure = to`.
pub fn time_average_in_system(intervals: &[(f64, f64)], from: f64, to: f64) -> f64 {
    let span = to - from;
    if span <= 0.0 {
        return 0.0;
    }
    let area: f64 = intervals
        .iter()
        .map(|&(a, d)| (d.min(to) - a.max(from)).max(0.0))
        .sum();
    area / span
}
