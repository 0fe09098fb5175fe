use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::trainer::StrategyKind;

/// Version line written as the first line of every record CSV.
pub const RECORD_SCHEMA: &str = "netsense-records/1";

/// One synchronization interval of one run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentRecord {
    /// Simulated wall clock at the end of the step, seconds.
    pub sim_time: f64,
    /// 1-based step number.
    pub step: u64,
    pub strategy: StrategyKind,
    /// Compression ratio the step was sent at.
    pub ratio: f64,
    /// Bits this worker pushed through the bottleneck.
    pub data_size: f64,
    /// Communication time of the step, seconds.
    pub rtt: f64,
    pub ebb: f64,
    pub btlbw: f64,
    pub rtprop: f64,
    pub bdp: f64,
    /// Service rate of the link when the step was sent.
    pub capacity_bps: f64,
    pub loss: f64,
    pub accuracy: f64,
    /// Whether `loss` and `accuracy` were measured at this step rather than
    /// carried forward.
    pub evaluated: bool,
    pub samples_per_sec: f64,
    pub loss_event: bool,
}

impl ExperimentRecord {
    pub fn check_finite(&self) -> Result<()> {
        let fields = [
            self.sim_time,
            self.ratio,
            self.data_size,
            self.rtt,
            self.ebb,
            self.btlbw,
            self.rtprop,
            self.bdp,
            self.capacity_bps,
            self.loss,
            self.accuracy,
            self.samples_per_sec,
        ];
        match fields.iter().position(|v| !v.is_finite()) {
            Some(index) => Err(Error::NonFinite {
                index,
                value: fields[index],
            }),
            None => Ok(()),
        }
    }
}

pub fn write_records(path: &Path, records: &[ExperimentRecord]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    writeln!(out, "#schema={RECORD_SCHEMA}").map_err(|e| Error::io(path, e))?;
    let mut w = csv::Writer::from_writer(out);
    for r in records {
        r.check_finite()?;
        w.serialize(r).map_err(|e| Error::csv(path, e))?;
    }
    if records.is_empty() {
        w.write_record([
            "sim_time",
            "step",
            "strategy",
            "ratio",
            "data_size",
            "rtt",
            "ebb",
            "btlbw",
            "rtprop",
            "bdp",
            "capacity_bps",
            "loss",
            "accuracy",
            "evaluated",
            "samples_per_sec",
            "loss_event",
        ])
        .map_err(|e| Error::csv(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// Reads a record CSV, checking the schema line.
pub fn read_records(path: &Path) -> Result<Vec<ExperimentRecord>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = BufReader::new(file);
    let mut first = String::new();
    reader.read_line(&mut first).map_err(|e| Error::io(path, e))?;
    let expected = format!("#schema={RECORD_SCHEMA}");
    if first.trim_end() != expected {
        return Err(Error::Simulation(format!(
            "{}: expected schema line `{expected}`, found `{}`",
            path.display(),
            first.trim_end()
        )));
    }
    let mut rdr = csv::Reader::from_reader(reader);
    rdr.deserialize()
        .map(|r| r.map_err(|e| Error::csv(path, e)))
        .collect()
}
