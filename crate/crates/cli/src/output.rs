//! Output schemas: metrics JSONL, per-state results CSV and S(k) grids.

use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::Path;

use anyhow::Result;
use gvmc::sr::StepRecord;
use serde::{Deserialize, Serialize};

/// Bumped on any breaking change to the records below.
pub const SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub schema_version: u32,
    #[serde(flatten)]
    pub step: StepRecord,
}

/// Append-only metrics stream, flushed after every line.
pub struct MetricsWriter(BufWriter<File>);

impl MetricsWriter {
    pub fn create(path: &Path, append: bool) -> Result<Self> {
        let f = OpenOptions::new()
            .create(true)
            .write(true)
            .append(append)
            .truncate(!append)
            .open(path)?;
        Ok(Self(BufWriter::new(f)))
    }

    pub fn write(&mut self, step: &StepRecord) -> std::io::Result<()> {
        let rec = MetricsRecord {
            schema_version: SCHEMA_VERSION,
            step: step.clone(),
        };
        serde_json::to_writer(&mut self.0, &rec)?;
        self.0.write_all(b"\n")?;
        self.0.flush()?;
        Ok(())
    }
}

/// One state of a converged subspace. Momenta are in radians; `q_sf` is
/// `+1`/`-1` for even/odd spin-flip parity and 0 when unprojected.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub q_x: f64,
    pub q_y: f64,
    pub q_sf: i8,
    pub state: usize,
    pub e_per_site: f64,
    pub error: f64,
    pub v_score: f64,
}

/// Principal values of a general observable.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObservableRow {
    pub observable: String,
    pub state: usize,
    pub value: f64,
    pub error: f64,
}

/// `S(k)` for one momentum and principal state; `mx`, `my` index `k` in
/// units of `2π/L`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StructureFactorRow {
    pub mx: usize,
    pub my: usize,
    pub k_x: f64,
    pub k_y: f64,
    pub state: usize,
    pub value: f64,
    pub error: f64,
}

pub fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}
