//! Run output files: requests, timeseries and decisions as CSV, reports as JSON.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::Serialize;
use thiserror::Error;

use super::{DecisionRecord, RequestRecord, TimeseriesRow};

#[derive(Debug, Error)]
pub enum OutputError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Csv {
        path: PathBuf,
        #[source]
        source: csv::Error,
    },
    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

fn write_csv<T: Serialize>(path: &Path, rows: &[T], header: &[&str]) -> Result<(), OutputError> {
    let csv_err = |source| OutputError::Csv {
        path: path.to_path_buf(),
        source,
    };
    let file = File::create(path).map_err(|source| OutputError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let mut w = csv::WriterBuilder::new()
        .has_headers(false)
        .from_writer(BufWriter::new(file));
    // Written explicitly so empty files still carry their schema.
    w.write_record(header).map_err(csv_err)?;
    for row in rows {
        w.serialize(row).map_err(csv_err)?;
    }
    w.flush().map_err(|source| OutputError::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn read_csv<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>, OutputError> {
    let csv_err = |source| OutputError::Csv {
        path: path.to_path_buf(),
        source,
    };
    let mut r = csv::Reader::from_path(path).map_err(csv_err)?;
    r.deserialize().collect::<Result<_, _>>().map_err(csv_err)
}

pub const REQUESTS_HEADER: [&str; 7] = [
    "request_id",
    "arrival_time_s",
    "ttft_s",
    "e2e_s",
    "mean_tpot_s",
    "input_tokens",
    "output_tokens",
];
pub const TIMESERIES_HEADER: [&str; 5] = ["time_s", "layer_id", "replica_id", "utilization", "queue_len"];
pub const DECISIONS_HEADER: [&str; 4] = ["time_s", "kind", "layer_id", "detail"];

pub fn write_requests(path: &Path, rows: &[RequestRecord]) -> Result<(), OutputError> {
    write_csv(path, rows, &REQUESTS_HEADER)
}

pub fn read_requests(path: &Path) -> Result<Vec<RequestRecord>, OutputError> {
    read_csv(path)
}

pub fn write_timeseries(path: &Path, rows: &[TimeseriesRow]) -> Result<(), OutputError> {
    write_csv(path, rows, &TIMESERIES_HEADER)
}

pub fn read_timeseries(path: &Path) -> Result<Vec<TimeseriesRow>, OutputError> {
    read_csv(path)
}

pub fn write_decisions(path: &Path, rows: &[DecisionRecord]) -> Result<(), OutputError> {
    write_csv(path, rows, &DECISIONS_HEADER)
}

pub fn read_decisions(path: &Path) -> Result<Vec<DecisionRecord>, OutputError> {
    read_csv(path)
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), OutputError> {
    let file = File::create(path).map_err(|source| OutputError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let mut w = BufWriter::new(file);
    serde_json::to_writer_pretty(&mut w, value).map_err(|source| OutputError::Json {
        path: path.to_path_buf(),
        source,
    })?;
    w.write_all(b"\n")
        .and_then(|_| w.flush())
        .map_err(|source| OutputError::Io {
            path: path.to_path_buf(),
            source,
        })
}
