//! Synchronous data-parallel SGD over the simulated link.

mod model;

use std::fmt;
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use model::{Mlp, ModelInstance, Quadratic, SoftmaxClassifier, TaskConfig, ToyModel};

use crate::compressor::{compress_with_mask, dense_wire_size, densify, prune_mask, topk_sparsify, CompressionConfig, PruneMask};
use crate::controller::{ControlSnapshot, ControllerConfig, ControllerState, IntervalMeasurement};
use crate::error::{Error, Result};
use crate::experiment::{ExperimentRecord, Target};
use crate::grad::{accumulate, update_residual, GradientVector, ResidualBuffer};
use crate::netsim::{CollectiveKind, CollectiveModel, LinkState, TraceEvent};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StrategyKind {
    /// Adaptive compression driven by the BDP controller.
    Netsense,
    /// Fixed-ratio TopK with error feedback.
    TopkStatic,
    /// Uncompressed ring allreduce.
    AllreduceDense,
}

impl StrategyKind {
    pub const ALL: [StrategyKind; 3] = [
        StrategyKind::Netsense,
        StrategyKind::TopkStatic,
        StrategyKind::AllreduceDense,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            StrategyKind::Netsense => "netsense",
            StrategyKind::TopkStatic => "topk_static",
            StrategyKind::AllreduceDense => "allreduce_dense",
        }
    }

    pub fn is_sparse(self) -> bool {
        self != StrategyKind::AllreduceDense
    }

    fn collective(self) -> CollectiveKind {
        if self.is_sparse() {
            CollectiveKind::AllgatherSparse
        } else {
            CollectiveKind::RingAllreduceDense
        }
    }
}

impl fmt::Display for StrategyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingConfig {
    pub workers: usize,
    /// Per-worker minibatch size.
    pub batch: usize,
    /// SGD step size; unset picks the task default (0.05 quadratic, 0.1 classifiers).
    pub lr: Option<f64>,
    /// Step budget.
    pub steps: u64,
    /// Optional simulated-time budget in seconds.
    pub time_budget_s: Option<f64>,
    /// Forward/backward time per step.
    pub compute_time_s: f64,
    /// Extra per-step time sparse strategies spend selecting and packing.
    pub sparse_overhead_s: f64,
    /// Evaluate every this many steps (the last step is always evaluated).
    pub eval_every: u64,
    pub target_accuracy: Option<f64>,
    pub target_loss: Option<f64>,
    /// End the run at the first evaluation that meets the target.
    pub stop_at_target: bool,
    /// Ratio of the static TopK baseline.
    pub topk_rate: f64,
    pub topk_error_feedback: bool,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            workers: 8,
            batch: 32,
            lr: None,
            steps: 300,
            time_budget_s: None,
            compute_time_s: 0.01,
            sparse_overhead_s: 0.0,
            eval_every: 1,
            target_accuracy: None,
            target_loss: None,
            stop_at_target: false,
            topk_rate: 0.1,
            topk_error_feedback: true,
        }
    }
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<()> {
        if self.workers < 2 {
            return Err(Error::config("training.workers must be at least 2"));
        }
        if self.batch == 0 {
            return Err(Error::config("training.batch must be positive"));
        }
        if let Some(lr) = self.lr {
            if !(lr > 0.0 && lr.is_finite()) {
                return Err(Error::config("training.lr must be positive"));
            }
        }
        if self.steps == 0 {
            return Err(Error::config("training.steps must be positive"));
        }
        if let Some(b) = self.time_budget_s {
            if !(b > 0.0) {
                return Err(Error::config("training.time_budget_s must be positive"));
            }
        }
        if !(self.compute_time_s >= 0.0 && self.compute_time_s.is_finite()) {
            return Err(Error::config("training.compute_time_s must be non-negative"));
        }
        if !(self.sparse_overhead_s >= 0.0 && self.sparse_overhead_s.is_finite()) {
            return Err(Error::config("training.sparse_overhead_s must be non-negative"));
        }
        if self.eval_every == 0 {
            return Err(Error::config("training.eval_every must be positive"));
        }
        if !(self.topk_rate > 0.0 && self.topk_rate <= 1.0) {
            return Err(Error::config("training.topk_rate must lie in (0, 1]"));
        }
        if self.target_accuracy.is_some() && self.target_loss.is_some() {
            return Err(Error::config("set at most one of training.target_accuracy and training.target_loss"));
        }
        Ok(())
    }

    pub fn target(&self) -> Option<Target> {
        match (self.target_accuracy, self.target_loss) {
            (Some(a), _) => Some(Target::Accuracy(a)),
            (None, Some(l)) => Some(Target::Loss(l)),
            (None, None) => None,
        }
    }
}

/// Per-worker raw and transmitted gradients of the most recent step.
#[derive(Debug, Clone)]
pub struct StepDetails {
    pub raw: Vec<GradientVector>,
    pub transmitted: Vec<GradientVector>,
}

struct WorkerOut {
    raw: Option<GradientVector>,
    transmitted: GradientVector,
    residual: Option<ResidualBuffer>,
    payload_bits: f64,
    accumulated_norm: f64,
}

/// One training run: a model, a strategy and a link.
pub struct Trainer {
    model: Arc<ModelInstance>,
    strategy: StrategyKind,
    cfg: TrainingConfig,
    compression: CompressionConfig,
    controller: ControllerState,
    link: LinkState,
    collective: CollectiveModel,
    rto_s: f64,
    lr: f64,
    params: Vec<f64>,
    residuals: Vec<ResidualBuffer>,
    dense_enough: bool,
    step: u64,
    wall_clock: f64,
    last_eval: (f64, f64),
    keep_details: bool,
    details: Option<StepDetails>,
}

impl Trainer {
    pub fn new(
        model: Arc<ModelInstance>,
        strategy: StrategyKind,
        cfg: TrainingConfig,
        controller: ControllerConfig,
        compression: CompressionConfig,
        link: LinkState,
        rto_s: f64,
    ) -> Result<Self> {
        cfg.validate()?;
        compression.validate()?;
        if !(rto_s > 0.0) {
            return Err(Error::config("rto must be positive"));
        }
        let controller = ControllerState::new(controller)?;
        let collective = CollectiveModel::new(strategy.collective(), cfg.workers)?;
        let dim = model.dim();
        let params = model.init_params.clone();
        let lr = cfg.lr.unwrap_or_else(|| model.default_lr());
        let last_eval = model.evaluate(&params);
        Ok(Self {
            residuals: vec![ResidualBuffer::zeros(dim); cfg.workers],
            model,
            strategy,
            cfg,
            compression,
            controller,
            link,
            collective,
            rto_s,
            lr,
            params,
            dense_enough: true,
            step: 0,
            wall_clock: 0.0,
            last_eval,
            keep_details: false,
            details: None,
        })
    }

    /// Retain per-worker gradients of each step for inspection.
    pub fn keep_details(mut self, keep: bool) -> Self {
        self.keep_details = keep;
        self
    }

    pub fn last_details(&self) -> Option<&StepDetails> {
        self.details.as_ref()
    }

    pub fn strategy(&self) -> StrategyKind {
        self.strategy
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn residuals(&self) -> &[ResidualBuffer] {
        &self.residuals
    }

    pub fn controller(&self) -> &ControllerState {
        &self.controller
    }

    pub fn link(&self) -> &LinkState {
        &self.link
    }

    pub fn wall_clock(&self) -> f64 {
        self.wall_clock
    }

    pub fn steps_done(&self) -> u64 {
        self.step
    }

    fn compute_workers(&self, ratio: f64) -> Result<Vec<WorkerOut>> {
        let dim = self.model.dim();
        let step = self.step;
        let keep = self.keep_details;
        let shared = if self.model.full_batch() {
            Some(self.model.local_gradient(&self.params, 0, step, self.cfg.batch)?)
        } else {
            None
        };
        let masks: Vec<(f64, PruneMask)> = if self.strategy == StrategyKind::Netsense && self.compression.pruning {
            let mut rs = vec![ratio, (2.0 * ratio).min(1.0)];
            rs.dedup();
            rs.into_iter()
                .map(|r| Ok((r, prune_mask(&self.params, r)?)))
                .collect::<Result<_>>()?
        } else {
            Vec::new()
        };
        (0..self.cfg.workers)
            .into_par_iter()
            .map(|w| -> Result<WorkerOut> {
                let g = match &shared {
                    Some(g) => g.clone(),
                    None => self.model.local_gradient(&self.params, w, step, self.cfg.batch)?,
                };
                let raw = keep.then(|| g.clone());
                match self.strategy {
                    StrategyKind::AllreduceDense => Ok(WorkerOut {
                        accumulated_norm: g.l2_norm(),
                        transmitted: g,
                        raw,
                        residual: None,
                        payload_bits: (dense_wire_size(dim) * 8) as f64,
                    }),
                    StrategyKind::TopkStatic => {
                        let acc = if self.cfg.topk_error_feedback {
                            accumulate(&g, &self.residuals[w])?
                        } else {
                            g
                        };
                        let payload = topk_sparsify(&acc, self.cfg.topk_rate)?;
                        let transmitted = densify(&payload, dim)?;
                        let residual = if self.cfg.topk_error_feedback {
                            Some(update_residual(&acc, &transmitted)?)
                        } else {
                            None
                        };
                        Ok(WorkerOut {
                            accumulated_norm: acc.l2_norm(),
                            raw,
                            transmitted,
                            residual,
                            payload_bits: payload.wire_size_bits() as f64,
                        })
                    }
                    StrategyKind::Netsense => {
                        let c = compress_with_mask(&g, &self.residuals[w], ratio, &self.compression, |r| {
                            match masks.iter().find(|(mr, _)| *mr == r) {
                                Some((_, m)) => Ok(m.clone()),
                                None => prune_mask(&self.params, r),
                            }
                        })?;
                        Ok(WorkerOut {
                            transmitted: densify(&c.payload, dim)?,
                            raw,
                            payload_bits: c.payload.wire_size_bits() as f64,
                            residual: Some(c.residual),
                            accumulated_norm: c.accumulated_norm,
                        })
                    }
                }
            })
            .collect()
    }

    /// Offers `volume` bits at `start` and retransmits anything dropped after
    /// an RTO. Returns the total communication time and whether loss occurred.
    fn communicate(&mut self, volume: f64, start: f64) -> Result<(f64, bool)> {
        let first = self.link.transmit(volume, start)?;
        let mut done = start + first.rtt;
        let mut pending = first.dropped_bits;
        let loss = pending > 0.0;
        let mut rounds = 0;
        while pending > 0.0 {
            rounds += 1;
            if rounds > 10_000 {
                return Err(Error::Simulation(format!(
                    "transfer of {volume} bits made no progress after {rounds} retransmissions"
                )));
            }
            let retry_at = done + self.rto_s;
            let r = self.link.transmit(pending, retry_at)?;
            done = retry_at + r.rtt;
            pending = r.dropped_bits;
        }
        Ok((done - start, loss))
    }

    /// Runs one synchronous step and returns its record.
    pub fn sync_step(&mut self) -> Result<ExperimentRecord> {
        let n = self.cfg.workers;
        let dim = self.model.dim();
        let ratio = match self.strategy {
            StrategyKind::Netsense => self.controller.ratio(),
            StrategyKind::TopkStatic => self.cfg.topk_rate,
            StrategyKind::AllreduceDense => 1.0,
        };
        let compute = self.cfg.compute_time_s
            + if self.strategy.is_sparse() {
                self.cfg.sparse_overhead_s
            } else {
                0.0
            };

        let outs = self.compute_workers(ratio)?;

        let payload_bits = outs.iter().map(|o| o.payload_bits).fold(0.0, f64::max);
        let volume = self.collective.volume(payload_bits);
        self.wall_clock += compute;
        let send_time = self.wall_clock;
        let capacity_bps = self.link.schedule().service_rate(send_time);
        let (comm, loss_event) = self.communicate(volume, send_time)?;
        self.wall_clock += comm;

        let m = IntervalMeasurement::new(self.step, volume, comm).with_loss(loss_event);
        let snap: ControlSnapshot = match self.strategy {
            StrategyKind::Netsense => {
                self.dense_enough = outs.iter().any(|o| o.accumulated_norm > self.compression.tr_d);
                let (comp, collective, dense_enough) = (&self.compression, self.collective, self.dense_enough);
                self.controller.on_interval(&m, |r| {
                    collective.volume((comp.predicted_wire_size(r, dim, dense_enough) * 8) as f64)
                })?
            }
            _ => {
                let ebb = self.controller.observe(&m)?;
                let congestion = self.controller.congestion_detected(&m);
                self.controller.snapshot(ebb, congestion)
            }
        };

        let mut update = vec![0.0; dim];
        for o in &outs {
            for (u, t) in update.iter_mut().zip(o.transmitted.values()) {
                *u += t;
            }
        }
        let scale = self.lr / n as f64;
        for (p, u) in self.params.iter_mut().zip(&update) {
            *p -= scale * u;
        }
        if let Some(bad) = self.params.iter().position(|p| !p.is_finite()) {
            return Err(Error::NonFinite {
                index: bad,
                value: self.params[bad],
            });
        }

        let mut raws = Vec::new();
        let mut sent = Vec::new();
        for (w, o) in outs.into_iter().enumerate() {
            if let Some(r) = o.residual {
                self.residuals[w] = r;
            }
            if self.keep_details {
                raws.extend(o.raw);
                sent.push(o.transmitted);
            }
        }
        self.details = self.keep_details.then_some(StepDetails {
            raw: raws,
            transmitted: sent,
        });

        self.step += 1;
        let evaluated = self.step.is_multiple_of(self.cfg.eval_every) || self.step == self.cfg.steps;
        if evaluated {
            self.last_eval = self.model.evaluate(&self.params);
        }
        let (loss, accuracy) = self.last_eval;
        Ok(ExperimentRecord {
            sim_time: self.wall_clock,
            step: self.step,
            strategy: self.strategy,
            ratio,
            data_size: volume,
            rtt: comm,
            ebb: snap.ebb,
            btlbw: snap.btlbw,
            rtprop: snap.rtprop,
            bdp: snap.bdp,
            capacity_bps,
            loss,
            accuracy,
            evaluated,
            samples_per_sec: (self.cfg.batch * n) as f64 / (compute + comm),
            loss_event,
        })
    }

    /// Trains until the step or time budget runs out, or the target is met
    /// when `stop_at_target` is set.
    pub fn run(mut self) -> Result<TrainingRun> {
        let mut records = Vec::new();
        while self.step < self.cfg.steps
            && self.cfg.time_budget_s.is_none_or(|b| self.wall_clock < b)
        {
            let rec = self.sync_step()?;
            let reached = rec.evaluated && self.cfg.target().is_some_and(|t| t.met(&rec));
            records.push(rec);
            if reached && self.cfg.stop_at_target {
                break;
            }
        }
        Ok(TrainingRun {
            strategy: self.strategy,
            records,
            trace: self.link.trace().map(<[TraceEvent]>::to_vec),
            final_params: self.params,
        })
    }
}

#[derive(Debug, Clone)]
pub struct TrainingRun {
    pub strategy: StrategyKind,
    pub records: Vec<ExperimentRecord>,
    pub trace: Option<Vec<TraceEvent>>,
    pub final_params: Vec<f64>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::netsim::{BandwidthSchedule, LinkConfig};

    fn quad() -> Arc<ModelInstance> {
        Arc::new(
            ModelInstance::build(
                &TaskConfig::Quadratic {
                    dim: 400,
                    rows: 120,
                    row_nnz: 20,
                    row_norm: 1.0,
                    optimum_density: 0.2,
                    init_scale: 0.01,
                },
                3,
            )
            .unwrap(),
        )
    }

    fn trainer(strategy: StrategyKind, comp: CompressionConfig, ctl: ControllerConfig) -> Trainer {
        let link = LinkConfig::default()
            .build(&BandwidthSchedule::Static { level_bps: 1e8 })
            .unwrap();
        let cfg = TrainingConfig {
            workers: 4,
            steps: 30,
            lr: Some(0.3),
            ..Default::default()
        };
        Trainer::new(quad(), strategy, cfg, ctl, comp, link, 0.2).unwrap()
    }

    #[test]
    fn full_ratio_without_quantization_matches_dense() {
        let comp = CompressionConfig {
            tr_q: 0.0,
            pruning: false,
            ..Default::default()
        };
        let ctl = ControllerConfig {
            ratio_init: 1.0,
            beta1: 0.0,
            beta2: 0.0,
            alpha: 1.0,
            ..Default::default()
        };
        let mut sparse = trainer(StrategyKind::Netsense, comp.clone(), ctl.clone());
        let mut dense = trainer(StrategyKind::AllreduceDense, comp, ctl);
        for _ in 0..20 {
            sparse.sync_step().unwrap();
            dense.sync_step().unwrap();
            assert_eq!(sparse.params(), dense.params());
        }
    }

    #[test]
    fn wall_clock_sums_compute_and_comm() {
        let run = trainer(StrategyKind::Netsense, CompressionConfig::default(), ControllerConfig::default())
            .run()
            .unwrap();
        let mut t = 0.0;
        for r in &run.records {
            t += 0.01;
            t += r.rtt;
            assert_eq!(r.sim_time, t);
        }
        assert!(run.records.windows(2).all(|w| w[0].sim_time < w[1].sim_time));
    }

    #[test]
    fn error_feedback_conserves_gradient_mass() {
        let mut t = trainer(StrategyKind::Netsense, CompressionConfig::default(), ControllerConfig::default())
            .keep_details(true);
        let dim = 400;
        let mut raw_sum = vec![vec![0.0; dim]; 4];
        let mut sent_sum = vec![vec![0.0; dim]; 4];
        for _ in 0..25 {
            t.sync_step().unwrap();
            let d = t.last_details().unwrap();
            for w in 0..4 {
                for j in 0..dim {
                    raw_sum[w][j] += d.raw[w].values()[j];
                    sent_sum[w][j] += d.transmitted[w].values()[j];
                }
            }
        }
        for w in 0..4 {
            let res = t.residuals()[w].values();
            let scale = raw_sum[w].iter().map(|v| v.abs()).fold(1.0, f64::max);
            for j in 0..dim {
                let err = (sent_sum[w][j] + res[j] - raw_sum[w][j]).abs();
                assert!(err <= 1e-9 * scale, "worker {w} coord {j}: {err}");
            }
        }
    }

    #[test]
    fn baselines_fill_estimator_fields() {
        let run = trainer(StrategyKind::TopkStatic, CompressionConfig::default(), ControllerConfig::default())
            .run()
            .unwrap();
        let last = run.records.last().unwrap();
        assert!(last.btlbw > 0.0 && last.rtprop > 0.0);
        assert_eq!(last.ratio, 0.1);
    }

    #[test]
    fn loss_triggers_retransmission() {
        let link = LinkConfig {
            queue_cap_bits: Some(0.0),
            ..Default::default()
        }
        .build(&BandwidthSchedule::Static { level_bps: 1e6 })
        .unwrap();
        let cfg = TrainingConfig {
            workers: 4,
            steps: 3,
            ..Default::default()
        };
        let mut t = Trainer::new(
            quad(),
            StrategyKind::AllreduceDense,
            cfg,
            ControllerConfig::default(),
            CompressionConfig::default(),
            link,
            0.2,
        )
        .unwrap();
        let r = t.sync_step().unwrap();
        assert!(r.loss_event);
        // 1.5 * 400 * 32 bits through a 4000-bit pipe takes several RTOs
        assert!(r.rtt > 0.2);
    }

    fn dense_pair(lr: Option<f64>, steps: u64) -> Trainer {
        let link = LinkConfig::default()
            .build(&BandwidthSchedule::Static { level_bps: 1e8 })
            .unwrap();
        let cfg = TrainingConfig {
            workers: 2,
            steps,
            lr,
            ..Default::default()
        };
        let ctl = ControllerConfig::default();
        Trainer::new(quad(), StrategyKind::AllreduceDense, cfg, ctl, CompressionConfig::default(), link, 0.2).unwrap()
    }

    #[test]
    fn two_worker_dense_is_full_gradient_descent() {
        let model = quad();
        let ToyModel::Quadratic(q) = &model.model else { unreachable!() };
        let mut t = dense_pair(None, 25);
        let lr = model.default_lr();
        let mut w = model.init_params.clone();
        for _ in 0..25 {
            t.sync_step().unwrap();
            let g = q.gradient(&w);
            for (wi, gi) in w.iter_mut().zip(&g) {
                *wi -= lr * gi;
            }
            for (a, b) in t.params().iter().zip(&w) {
                assert!((a - b).abs() <= 1e-12 * b.abs().max(1.0), "{a} vs {b}");
            }
        }
    }

    #[test]
    fn dense_loss_is_monotone_below_two_over_l() {
        let model = quad();
        let ToyModel::Quadratic(q) = &model.model else { unreachable!() };
        let lr = 1.9 / q.lipschitz(200);
        let run = dense_pair(Some(lr), 60).run().unwrap();
        let mut prev = model.initial_loss();
        for r in &run.records {
            assert!(r.loss <= prev, "step {}: {} > {prev}", r.step, r.loss);
            prev = r.loss;
        }
        assert!(prev < 0.5 * model.initial_loss());
    }
}
