//! Fluid model of the shared bottleneck link.
//!
//! The link holds a FIFO backlog of bits that drains at the schedule's service
//! rate (capacity minus cross traffic). Up to one bandwidth-delay product of
//! that backlog is in flight on the wire and costs no extra delay; anything
//! beyond sits in the router queue. A transfer's round completion time is
//! therefore
//!
//! ```text
//! rtt = max(2 * prop_delay, time to drain everything queued ahead of and including it)
//! ```
//!
//! which is flat at `2 * prop_delay` while the offered volume fits in the pipe
//! and grows linearly with the excess once it does not. Bits that would push
//! the standing queue past `queue_cap` are dropped.

use serde::{Deserialize, Serialize};

use super::schedule::{make_schedule, BandwidthSchedule, Schedule};
use crate::error::{Error, Result};

/// Link parameters shared by every bandwidth schedule of an experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LinkConfig {
    /// One-way propagation delay.
    pub prop_delay_s: f64,
    /// Router buffer in bits. When absent the buffer holds
    /// `queue_cap_bdps` bandwidth-delay products at the initial capacity.
    pub queue_cap_bits: Option<f64>,
    pub queue_cap_bdps: f64,
    /// Wait between a round's completion and the resend of its dropped bits.
    /// Defaults to one base round trip.
    pub rto_s: Option<f64>,
    /// Keep a per-event trace of the bottleneck queue.
    pub trace: bool,
}

impl Default for LinkConfig {
    fn default() -> Self {
        Self {
            prop_delay_s: 0.002,
            queue_cap_bits: None,
            queue_cap_bdps: 4.0,
            rto_s: None,
            trace: false,
        }
    }
}

impl LinkConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.prop_delay_s > 0.0 && self.prop_delay_s.is_finite()) {
            return Err(Error::config("link.prop_delay_s must be positive"));
        }
        if let Some(cap) = self.queue_cap_bits {
            if !(cap >= 0.0 && cap.is_finite()) {
                return Err(Error::config("link.queue_cap_bits must be non-negative"));
            }
        }
        if !(self.queue_cap_bdps >= 0.0 && self.queue_cap_bdps.is_finite()) {
            return Err(Error::config("link.queue_cap_bdps must be non-negative"));
        }
        if let Some(rto) = self.rto_s {
            if !(rto > 0.0 && rto.is_finite()) {
                return Err(Error::config("link.rto_s must be positive"));
            }
        }
        Ok(())
    }

    pub fn recovery_delay(&self) -> f64 {
        self.rto_s.unwrap_or(2.0 * self.prop_delay_s)
    }

    /// Builds a fresh link for `schedule`.
    pub fn build(&self, schedule: &BandwidthSchedule) -> Result<LinkState> {
        self.validate()?;
        let schedule = make_schedule(schedule)?;
        let cap = self.queue_cap_bits.unwrap_or_else(|| {
            self.queue_cap_bdps * schedule.service_rate(0.0) * 2.0 * self.prop_delay_s
        });
        let link = LinkState::new(schedule, self.prop_delay_s, cap)?;
        Ok(if self.trace { link.with_trace() } else { link })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TransferResult {
    /// Round completion time in seconds.
    pub rtt: f64,
    pub delivered: bool,
    /// Bits accepted onto the bottleneck.
    pub bits_on_bottleneck: f64,
    pub dropped_bits: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum TraceKind {
    Arrive,
    Drop,
    Complete,
}

/// One line of the optional event trace.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TraceEvent {
    pub time: f64,
    #[serde(rename = "type")]
    pub kind: TraceKind,
    pub bits: f64,
    pub queue_depth: f64,
}

#[derive(Debug, Clone)]
pub struct LinkState {
    schedule: Schedule,
    prop_delay: f64,
    queue_cap: f64,
    now: f64,
    backlog: f64,
    delivered: f64,
    trace: Option<Vec<TraceEvent>>,
}

impl LinkState {
    /// `prop_delay` is one-way; `queue_cap` is the router buffer in bits.
    pub fn new(schedule: Schedule, prop_delay: f64, queue_cap: f64) -> Result<Self> {
        if !(prop_delay > 0.0 && prop_delay.is_finite()) {
            return Err(Error::config(format!("prop_delay must be positive, got {prop_delay}")));
        }
        if !(queue_cap >= 0.0) {
            return Err(Error::config(format!("queue_cap must be non-negative, got {queue_cap}")));
        }
        Ok(Self {
            schedule,
            prop_delay,
            queue_cap,
            now: 0.0,
            backlog: 0.0,
            delivered: 0.0,
            trace: None,
        })
    }

    pub fn with_trace(mut self) -> Self {
        self.trace = Some(Vec::new());
        self
    }

    pub fn schedule(&self) -> &Schedule {
        &self.schedule
    }

    pub fn prop_delay(&self) -> f64 {
        self.prop_delay
    }

    pub fn base_rtt(&self) -> f64 {
        2.0 * self.prop_delay
    }

    pub fn queue_cap(&self) -> f64 {
        self.queue_cap
    }

    pub fn now(&self) -> f64 {
        self.now
    }

    /// Bits accepted but not yet served.
    pub fn backlog(&self) -> f64 {
        self.backlog
    }

    /// Total bits served since time zero.
    pub fn delivered_bits(&self) -> f64 {
        self.delivered
    }

    /// True bandwidth-delay product at time `t`.
    pub fn bdp_at(&self, t: f64) -> f64 {
        self.schedule.service_rate(t) * self.base_rtt()
    }

    /// Portion of the backlog waiting in the router queue.
    pub fn queue_depth(&self) -> f64 {
        (self.backlog - self.bdp_at(self.now)).max(0.0)
    }

    pub fn trace(&self) -> Option<&[TraceEvent]> {
        self.trace.as_deref()
    }

    /// Serves the backlog up to time `until`.
    pub fn advance(&mut self, until: f64) -> Result<()> {
        if until < self.now {
            return Err(Error::Simulation(format!(
                "cannot advance link clock backwards from {} to {until}",
                self.now
            )));
        }
        if self.backlog > 0.0 {
            let served = self.schedule.integrate(self.now, until).min(self.backlog);
            self.backlog -= served;
            self.delivered += served;
            if self.backlog < 1e-9 {
                self.delivered += self.backlog;
                self.backlog = 0.0;
            }
        }
        self.now = until;
        Ok(())
    }

    /// Offers `bits` to the link at `start_time`.
    pub fn transmit(&mut self, bits: f64, start_time: f64) -> Result<TransferResult> {
        if !(bits > 0.0 && bits.is_finite()) {
            return Err(Error::Simulation(format!("transfer size must be positive, got {bits}")));
        }
        self.advance(start_time)?;
        let pipe = self.bdp_at(start_time);
        let overflow = (self.backlog + bits - pipe - self.queue_cap).max(0.0);
        let accepted = (bits - overflow).max(0.0);
        let dropped = bits - accepted;
        self.backlog += accepted;

        let drain = self.schedule.drain_time(self.backlog, start_time);
        let rtt = drain.max(self.base_rtt());
        let depth = self.queue_depth();
        if let Some(trace) = self.trace.as_mut() {
            trace.push(TraceEvent {
                time: start_time,
                kind: TraceKind::Arrive,
                bits: accepted,
                queue_depth: depth,
            });
            if dropped > 0.0 {
                trace.push(TraceEvent {
                    time: start_time,
                    kind: TraceKind::Drop,
                    bits: dropped,
                    queue_depth: depth,
                });
            }
            trace.push(TraceEvent {
                time: start_time + rtt,
                kind: TraceKind::Complete,
                bits: accepted,
                queue_depth: 0.0,
            });
        }
        Ok(TransferResult {
            rtt,
            delivered: dropped == 0.0,
            bits_on_bottleneck: accepted,
            dropped_bits: dropped,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const C: f64 = 1e9;
    const D: f64 = 0.002;

    fn static_link(queue_cap: f64) -> LinkState {
        let s = make_schedule(&BandwidthSchedule::Static { level_bps: C }).unwrap();
        LinkState::new(s, D, queue_cap).unwrap()
    }

    #[test]
    fn small_transfer_sees_base_rtt() {
        let mut link = static_link(1e9);
        let r = link.transmit(1e4, 0.0).unwrap();
        assert!(r.delivered);
        // 2d + bits/C is within a rounding error of 2d for bits << BDP
        assert!((r.rtt - (2.0 * D + 1e4 / C)).abs() < 1e-5);
        assert_eq!(r.rtt, 2.0 * D);
    }

    #[test]
    fn back_to_back_bdp_transfers_queue() {
        let mut link = static_link(1e9);
        let bdp = C * 2.0 * D;
        let first = link.transmit(bdp, 0.0).unwrap();
        assert!((first.rtt - 2.0 * D).abs() < 1e-15);
        let second = link.transmit(bdp, 0.0).unwrap();
        // queueing delay equals the first transfer's remaining service time
        let residual_service = bdp / C;
        assert!((second.rtt - 2.0 * D - residual_service).abs() < 1e-12);
    }

    #[test]
    fn overflow_drops_and_reports_loss() {
        let bdp = C * 2.0 * D;
        let mut link = static_link(bdp);
        // fill pipe and queue
        let r = link.transmit(2.0 * bdp, 0.0).unwrap();
        assert!(r.delivered);
        let r = link.transmit(0.5 * bdp, 0.0).unwrap();
        assert!(!r.delivered);
        assert_eq!(r.dropped_bits, 0.5 * bdp);
        assert_eq!(r.bits_on_bottleneck, 0.0);
        assert!(link.queue_depth() <= link.queue_cap() + 1e-6);
    }

    #[test]
    fn advance_without_backlog_only_moves_clock() {
        let mut link = static_link(1e9);
        link.advance(3.0).unwrap();
        assert_eq!(link.now(), 3.0);
        assert_eq!(link.backlog(), 0.0);
        assert_eq!(link.delivered_bits(), 0.0);
        assert!(link.advance(1.0).is_err());
    }

    #[test]
    fn fluid_drain_empties_after_q_over_c() {
        let mut link = static_link(1e12);
        let q = 5e8;
        link.transmit(q, 0.0).unwrap();
        link.advance(q / C * 0.5).unwrap();
        assert!((link.backlog() - q * 0.5).abs() < 1e-3);
        link.advance(q / C).unwrap();
        assert_eq!(link.backlog(), 0.0);
        assert!((link.delivered_bits() - q).abs() < 1e-3);
    }

    #[test]
    fn piecewise_drain_over_step_down() {
        let s = make_schedule(&BandwidthSchedule::Degrading {
            start_bps: 1000e6,
            end_bps: 200e6,
            step_bps: 400e6,
            dwell_s: 1.0,
        })
        .unwrap();
        let mut link = LinkState::new(s, D, 1e12).unwrap();
        link.transmit(5e8, 0.75).unwrap();
        // two-segment oracle: 0.25 s at 1000 Mb/s, the rest at 600 Mb/s
        let first = 0.25 * 1000e6;
        let rest = 5e8 - first;
        let t_empty = 1.0 + rest / 600e6;
        link.advance(1.0).unwrap();
        assert!((link.backlog() - rest).abs() < 1e-3);
        link.advance(1.0 + 0.5 * rest / 600e6).unwrap();
        assert!((link.backlog() - 0.5 * rest).abs() < 1e-3);
        link.advance(t_empty).unwrap();
        assert!(link.backlog() < 1e-3);
    }

    #[test]
    fn rtt_shape_flat_then_rising() {
        let bdp = C * 2.0 * D;
        let mut prev = 0.0;
        for i in 1..=40 {
            let load = bdp * i as f64 / 20.0;
            let mut link = static_link(1e12);
            let r = link.transmit(load, 0.0).unwrap();
            if load <= bdp {
                assert!((r.rtt - 2.0 * D).abs() <= 0.01 * 2.0 * D);
            } else {
                assert!(r.rtt > prev);
            }
            prev = r.rtt;
        }
    }

    #[test]
    fn work_conservation() {
        let mut link = static_link(1e12);
        let mut t = 0.0;
        for i in 0..50 {
            link.transmit(1e6 * (1 + i % 7) as f64, t).unwrap();
            t += 0.003;
        }
        link.advance(t).unwrap();
        assert!(link.delivered_bits() <= C * t + 1e-3);
    }

    #[test]
    fn fifo_completion_order() {
        let mut link = static_link(1e12);
        let mut last = 0.0;
        for i in 0..20 {
            let start = i as f64 * 1e-4;
            let r = link.transmit(3e6, start).unwrap();
            let done = start + r.rtt;
            assert!(done >= last);
            last = done;
        }
    }

    #[test]
    fn config_default_queue_is_four_bdps() {
        let link = LinkConfig::default()
            .build(&BandwidthSchedule::Static { level_bps: C })
            .unwrap();
        assert!((link.queue_cap() - 4.0 * C * 2.0 * D).abs() < 1e-6);
        assert!(link.trace().is_none());
    }

    #[test]
    fn trace_records_events() {
        let mut link = static_link(C * 2.0 * D).with_trace();
        link.transmit(1e6, 0.0).unwrap();
        link.transmit(1e7, 0.001).unwrap();
        let trace = link.trace().unwrap();
        assert_eq!(trace[0].kind, TraceKind::Arrive);
        assert!(trace.iter().any(|e| e.kind == TraceKind::Drop));
    }

    proptest::proptest! {
        #[test]
        fn rtt_floor_and_monotone_in_bits(a in 0.0f64..1e10, b in 0.0f64..1e10) {
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            let r_lo = static_link(f64::INFINITY).transmit(lo, 0.0).unwrap();
            let r_hi = static_link(f64::INFINITY).transmit(hi, 0.0).unwrap();
            proptest::prop_assert!(r_lo.rtt >= 2.0 * D);
            proptest::prop_assert!(r_lo.rtt <= r_hi.rtt);
        }

        #[test]
        fn transfers_conserve_bits(sizes in proptest::collection::vec((0.0f64..2e7, 0.0f64..0.01), 1..40)) {
            let mut link = static_link(2e7);
            let mut t = 0.0;
            let mut accepted = 0.0;
            for (bits, gap) in sizes {
                t += gap;
                let r = link.transmit(bits, t).unwrap();
                proptest::prop_assert!(r.rtt >= 2.0 * D && r.rtt.is_finite());
                proptest::prop_assert!((r.bits_on_bottleneck + r.dropped_bits - bits).abs() <= 1e-6 * bits.max(1.0));
                proptest::prop_assert!(link.queue_depth() <= link.queue_cap() + 1e-6);
                accepted += r.bits_on_bottleneck;
            }
            link.advance(link.now() + accepted / C + 1.0).unwrap();
            proptest::prop_assert!((link.delivered_bits() - accepted).abs() <= 1e-6 * accepted.max(1.0));
        }
    }
}
