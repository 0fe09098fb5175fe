//! Run matrices, record files, plot series and summaries.

mod config;
mod metrics;
mod presets;
mod record;

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rayon::prelude::*;

pub use config::{ExperimentConfig, ReportConfig};
pub use metrics::{
    compute_throughput, compute_tta, convergence_time, mean_throughput, peak_time, row_at, samples_per_step,
    steady_throughput, steps_to_target, Target,
};
pub use presets::{preset, PRESET_NAMES};
pub use record::{read_records, write_records, ExperimentRecord, RECORD_SCHEMA};

use crate::error::{Error, Result};
use crate::netsim::{BandwidthSchedule, TraceEvent};
use crate::trainer::{ModelInstance, StrategyKind, Trainer, TrainingRun};

pub const SUMMARY_FILE: &str = "summary.csv";
pub const CONFIG_FILE: &str = "config.toml";

/// One (bandwidth, strategy) cell of the run matrix.
#[derive(Debug, Clone)]
pub struct CellResult {
    pub bandwidth: BandwidthSchedule,
    pub strategy: StrategyKind,
    pub run: TrainingRun,
}

impl CellResult {
    pub fn file_stem(&self) -> String {
        cell_stem(&self.bandwidth, self.strategy)
    }
}

pub fn cell_stem(bandwidth: &BandwidthSchedule, strategy: StrategyKind) -> String {
    format!("{}__{}", bandwidth.label(), strategy)
}

/// Runs a single cell.
pub fn run_cell(
    cfg: &ExperimentConfig,
    model: Arc<ModelInstance>,
    bandwidth: &BandwidthSchedule,
    strategy: StrategyKind,
) -> Result<TrainingRun> {
    let link = cfg.link.build(bandwidth)?;
    Trainer::new(
        model,
        strategy,
        cfg.training.clone(),
        cfg.controller.clone(),
        cfg.compression.clone(),
        link,
        cfg.link.recovery_delay(),
    )?
    .run()
}

/// Runs every cell of the matrix, in parallel across cells. Results come
/// back in bandwidth-major, strategy-minor order.
pub fn run_scenario(cfg: &ExperimentConfig) -> Result<Vec<CellResult>> {
    cfg.validate()?;
    let model = Arc::new(ModelInstance::build(&cfg.task, cfg.seed)?);
    let cells: Vec<(BandwidthSchedule, StrategyKind)> = cfg
        .bandwidths
        .iter()
        .flat_map(|b| cfg.strategies.iter().map(move |s| (b.clone(), *s)))
        .collect();
    cells
        .into_par_iter()
        .map(|(bandwidth, strategy)| {
            let run = run_cell(cfg, Arc::clone(&model), &bandwidth, strategy)?;
            Ok(CellResult {
                bandwidth,
                strategy,
                run,
            })
        })
        .collect()
}

/// One line of the summary table.
#[derive(Debug, Clone, PartialEq)]
pub struct SummaryRow {
    pub bandwidth: String,
    pub strategy: StrategyKind,
    pub steps: u64,
    pub sim_time: f64,
    pub final_loss: f64,
    pub final_accuracy: f64,
    /// `batch * N / mean step time`.
    pub throughput: f64,
    pub tta: Option<f64>,
    pub convergence_time: Option<f64>,
    /// Time at which the netsense cell of the same bandwidth peaked.
    pub reference_time: Option<f64>,
    pub accuracy_at_reference: Option<f64>,
}

/// Summary rows for one bandwidth's cells, given in strategy order.
pub fn summarize_cells(
    cfg: &ExperimentConfig,
    bandwidth: &BandwidthSchedule,
    cells: &[(StrategyKind, &[ExperimentRecord])],
) -> Result<Vec<SummaryRow>> {
    let reference_time = cells
        .iter()
        .find(|(s, _)| *s == StrategyKind::Netsense)
        .and_then(|(_, r)| peak_time(r));
    let target = cfg.training.target();
    cells
        .iter()
        .map(|(strategy, records)| {
            let last = records
                .last()
                .ok_or_else(|| Error::Simulation(format!("{} produced no records", cell_stem(bandwidth, *strategy))))?;
            Ok(SummaryRow {
                bandwidth: bandwidth.label(),
                strategy: *strategy,
                steps: last.step,
                sim_time: last.sim_time,
                final_loss: last.loss,
                final_accuracy: last.accuracy,
                throughput: mean_throughput(records).unwrap_or(0.0),
                tta: target.and_then(|t| compute_tta(records, t)),
                convergence_time: match target {
                    Some(Target::Accuracy(a)) => convergence_time(
                        records,
                        a,
                        cfg.report.convergence_band,
                        cfg.report.convergence_evals,
                    ),
                    _ => None,
                },
                reference_time,
                accuracy_at_reference: reference_time.and_then(|t| row_at(records, t)).map(|r| r.accuracy),
            })
        })
        .collect()
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "N/A".to_string(), |x| x.to_string())
}

/// Renders summary rows as CSV text; missing values print as `N/A`.
pub fn format_summary(rows: &[SummaryRow]) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut put = |fields: &[String]| w.write_record(fields).expect("writing to memory cannot fail");
    put(&[
        "bandwidth",
        "strategy",
        "steps",
        "sim_time",
        "final_loss",
        "final_accuracy",
        "throughput",
        "tta",
        "convergence_time",
        "reference_time",
        "accuracy_at_reference",
    ]
    .map(String::from));
    for r in rows {
        put(&[
            r.bandwidth.clone(),
            r.strategy.to_string(),
            r.steps.to_string(),
            r.sim_time.to_string(),
            r.final_loss.to_string(),
            r.final_accuracy.to_string(),
            r.throughput.to_string(),
            fmt_opt(r.tta),
            fmt_opt(r.convergence_time),
            fmt_opt(r.reference_time),
            fmt_opt(r.accuracy_at_reference),
        ]);
    }
    let bytes = w.into_inner().expect("flushing to memory cannot fail");
    String::from_utf8(bytes).expect("csv output is utf-8")
}

pub fn write_summary(path: &Path, rows: &[SummaryRow]) -> Result<()> {
    fs::write(path, format_summary(rows)).map_err(|e| Error::io(path, e))
}

fn write_series(path: &Path, header: &str, rows: impl Iterator<Item = String>) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    writeln!(out, "{header}").map_err(|e| Error::io(path, e))?;
    for line in rows {
        writeln!(out, "{line}").map_err(|e| Error::io(path, e))?;
    }
    out.flush().map_err(|e| Error::io(path, e))
}

/// Writes the four plot series of one cell into `dir`, named after `stem`.
pub fn emit_plotdata(dir: &Path, stem: &str, records: &[ExperimentRecord], window: usize) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let paths: Vec<PathBuf> = ["accuracy", "throughput", "ratio", "bdp"]
        .iter()
        .map(|k| dir.join(format!("{stem}.{k}.csv")))
        .collect();
    write_series(
        &paths[0],
        "sim_time,accuracy",
        records
            .iter()
            .filter(|r| r.evaluated)
            .map(|r| format!("{},{}", r.sim_time, r.accuracy)),
    )?;
    write_series(
        &paths[1],
        "sim_time,samples_per_sec",
        compute_throughput(records, window)
            .into_iter()
            .map(|(t, v)| format!("{t},{v}")),
    )?;
    write_series(
        &paths[2],
        "sim_time,ratio",
        records.iter().map(|r| format!("{},{}", r.sim_time, r.ratio)),
    )?;
    write_series(
        &paths[3],
        "sim_time,bdp,data_size",
        records.iter().map(|r| format!("{},{},{}", r.sim_time, r.bdp, r.data_size)),
    )?;
    Ok(paths)
}

fn write_trace(path: &Path, events: &[TraceEvent]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::csv(path, e))?;
    for e in events {
        w.serialize(e).map_err(|e| Error::csv(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Writes the resolved config, one record CSV per cell, plot series, traces
/// and the summary table into `out_dir`.
pub fn write_outputs(cfg: &ExperimentConfig, cells: &[CellResult], out_dir: &Path) -> Result<Vec<SummaryRow>> {
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let cfg_path = out_dir.join(CONFIG_FILE);
    fs::write(&cfg_path, cfg.to_toml_string()?).map_err(|e| Error::io(&cfg_path, e))?;
    for cell in cells {
        let stem = cell.file_stem();
        write_records(&out_dir.join(format!("{stem}.csv")), &cell.run.records)?;
        emit_plotdata(&out_dir.join("plots"), &stem, &cell.run.records, cfg.report.throughput_window)?;
        if let Some(trace) = &cell.run.trace {
            let dir = out_dir.join("traces");
            fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
            write_trace(&dir.join(format!("{stem}.csv")), trace)?;
        }
    }
    let mut rows = Vec::new();
    for b in &cfg.bandwidths {
        let group: Vec<(StrategyKind, &[ExperimentRecord])> = cells
            .iter()
            .filter(|c| &c.bandwidth == b)
            .map(|c| (c.strategy, c.run.records.as_slice()))
            .collect();
        rows.extend(summarize_cells(cfg, b, &group)?);
    }
    write_summary(&out_dir.join(SUMMARY_FILE), &rows)?;
    Ok(rows)
}

/// Recomputes the summary of a finished run directory from its config and
/// record CSVs alone.
pub fn summarize_dir(dir: &Path) -> Result<Vec<SummaryRow>> {
    let cfg = ExperimentConfig::load(&dir.join(CONFIG_FILE))?;
    let mut rows = Vec::new();
    for b in &cfg.bandwidths {
        let loaded: Vec<(StrategyKind, Vec<ExperimentRecord>)> = cfg
            .strategies
            .iter()
            .map(|s| Ok((*s, read_records(&dir.join(format!("{}.csv", cell_stem(b, *s))))?)))
            .collect::<Result<_>>()?;
        let group: Vec<(StrategyKind, &[ExperimentRecord])> =
            loaded.iter().map(|(s, r)| (*s, r.as_slice())).collect();
        rows.extend(summarize_cells(&cfg, b, &group)?);
    }
    Ok(rows)
}
