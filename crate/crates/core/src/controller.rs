//! Network sensing and compression-ratio control.
//!
//! Each gradient transmission interval yields a throughput sample
//! (`EBB = data_size / RTT`). The controller keeps a windowed max of those
//! samples as the bottleneck bandwidth (BtlBw), a windowed min of RTTs as the
//! propagation round trip (RTprop), and sizes the next payload against
//! `BDP = BtlBw * RTprop`:
//!
//! - startup: `ratio = min(1, ratio + beta1)` until the RTT inflates or loss
//!   is reported;
//! - netsense: `ratio = max(floor, ratio * alpha)` when the payload exceeds
//!   `0.9 * BDP`, otherwise `ratio = min(1, ratio + beta2)`.
//!
//! Bandwidth samples follow the delivery-rate filter rule used by BBR: a
//! sample from an interval that did not saturate the link (no RTT inflation,
//! no loss) is application-limited and only enters the window if it raises
//! the current maximum. Saturated samples always enter, and entries older
//! than the window are evicted when a sample is inserted.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ControllerConfig {
    /// Multiplicative decrease factor.
    pub alpha: f64,
    /// Additive startup increment.
    pub beta1: f64,
    /// Additive increment in the netsense phase.
    pub beta2: f64,
    /// Fraction of the BDP a payload may occupy before the ratio is cut.
    pub bdp_fraction: f64,
    pub ratio_floor: f64,
    pub ratio_init: f64,
    /// Estimator window, in intervals.
    pub window: usize,
    /// RTT above `rtt_inflation * RTprop` counts as congestion.
    pub rtt_inflation: f64,
    /// Relative RTT excess over RTprop that marks an interval as saturated.
    pub saturation_tolerance: f64,
}

impl Default for ControllerConfig {
    fn default() -> Self {
        Self {
            alpha: 0.5,
            beta1: 0.05,
            beta2: 0.01,
            bdp_fraction: 0.9,
            ratio_floor: 0.005,
            ratio_init: 0.01,
            window: 10,
            rtt_inflation: 1.25,
            saturation_tolerance: 1e-6,
        }
    }
}

impl ControllerConfig {
    pub fn validate(&self) -> Result<()> {
        let in_unit = |name: &str, v: f64, open_low: bool| {
            let ok = if open_low { v > 0.0 && v <= 1.0 } else { (0.0..=1.0).contains(&v) };
            if ok {
                Ok(())
            } else {
                Err(Error::config(format!("controller.{name} must lie in the unit interval, got {v}")))
            }
        };
        in_unit("alpha", self.alpha, true)?;
        in_unit("beta1", self.beta1, false)?;
        in_unit("beta2", self.beta2, false)?;
        in_unit("bdp_fraction", self.bdp_fraction, true)?;
        in_unit("ratio_floor", self.ratio_floor, true)?;
        in_unit("ratio_init", self.ratio_init, true)?;
        if self.ratio_init < self.ratio_floor {
            return Err(Error::config("controller.ratio_init must not be below ratio_floor"));
        }
        if self.window == 0 {
            return Err(Error::config("controller.window must be at least 1"));
        }
        if !(self.rtt_inflation >= 1.0 && self.rtt_inflation.is_finite()) {
            return Err(Error::config("controller.rtt_inflation must be finite and >= 1"));
        }
        if !(self.saturation_tolerance >= 0.0 && self.saturation_tolerance.is_finite()) {
            return Err(Error::config("controller.saturation_tolerance must be finite and >= 0"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Startup,
    NetSense,
}

/// One transmission interval as seen by the sender.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IntervalMeasurement {
    pub interval_index: u64,
    /// Bits this worker pushed through the bottleneck during the interval.
    pub data_size_bits: f64,
    /// Round completion time in seconds.
    pub rtt_s: f64,
    /// The transport reported loss.
    pub loss: bool,
}

impl IntervalMeasurement {
    pub fn new(interval_index: u64, data_size_bits: f64, rtt_s: f64) -> Self {
        Self {
            interval_index,
            data_size_bits,
            rtt_s,
            loss: false,
        }
    }

    pub fn with_loss(mut self, loss: bool) -> Self {
        self.loss = loss;
        self
    }
}

/// Estimated bottleneck bandwidth for one interval, in bits per second.
pub fn measure_ebb(m: &IntervalMeasurement) -> Result<f64> {
    if !(m.rtt_s > 0.0 && m.rtt_s.is_finite()) {
        return Err(Error::Measurement(format!("rtt must be positive, got {}", m.rtt_s)));
    }
    if !(m.data_size_bits >= 0.0 && m.data_size_bits.is_finite()) {
        return Err(Error::Measurement(format!(
            "data size must be finite and non-negative, got {}",
            m.data_size_bits
        )));
    }
    Ok(m.data_size_bits / m.rtt_s)
}

/// Controller-visible signals after an interval, for logging.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ControlSnapshot {
    pub ebb: f64,
    pub btlbw: f64,
    pub rtprop: f64,
    pub bdp: f64,
    pub ratio: f64,
    pub phase: Phase,
    pub congestion: bool,
}

#[derive(Debug, Clone)]
pub struct ControllerState {
    cfg: ControllerConfig,
    ratio: f64,
    phase: Phase,
    btlbw_window: VecDeque<(u64, f64)>,
    rtprop_window: VecDeque<(u64, f64)>,
}

impl ControllerState {
    pub fn new(cfg: ControllerConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            ratio: cfg.ratio_init,
            phase: Phase::Startup,
            btlbw_window: VecDeque::with_capacity(cfg.window + 1),
            rtprop_window: VecDeque::with_capacity(cfg.window + 1),
            cfg,
        })
    }

    pub fn config(&self) -> &ControllerConfig {
        &self.cfg
    }

    pub fn ratio(&self) -> f64 {
        self.ratio
    }

    pub fn phase(&self) -> Phase {
        self.phase
    }

    /// Overrides the phase, e.g. to start directly in netsense.
    pub fn set_phase(&mut self, phase: Phase) {
        self.phase = phase;
    }

    /// Overrides the ratio, clamped to `[ratio_floor, 1]`.
    pub fn set_ratio(&mut self, ratio: f64) {
        self.ratio = ratio.clamp(self.cfg.ratio_floor, 1.0);
    }

    pub fn btlbw(&self) -> Option<f64> {
        self.btlbw_window.iter().map(|(_, v)| *v).reduce(f64::max)
    }

    pub fn rtprop(&self) -> Option<f64> {
        self.rtprop_window.iter().map(|(_, v)| *v).reduce(f64::min)
    }

    pub fn btlbw_window(&self) -> impl Iterator<Item = &(u64, f64)> {
        self.btlbw_window.iter()
    }

    pub fn rtprop_window(&self) -> impl Iterator<Item = &(u64, f64)> {
        self.rtprop_window.iter()
    }

    /// `BtlBw * RTprop` in bits.
    pub fn compute_bdp(&self) -> Result<f64> {
        match (self.btlbw(), self.rtprop()) {
            (Some(bw), Some(rt)) => Ok(bw * rt),
            _ => Err(Error::NotReady),
        }
    }

    /// Appends the interval's EBB and RTT to both windows unconditionally and
    /// evicts entries older than the window.
    pub fn update_estimates(&mut self, m: &IntervalMeasurement) -> Result<()> {
        let ebb = measure_ebb(m)?;
        self.push_rtt(m.interval_index, m.rtt_s);
        self.push_bandwidth(m.interval_index, ebb);
        Ok(())
    }

    /// Feeds one interval through the estimator with application-limited
    /// filtering of bandwidth samples. Returns the interval's EBB.
    pub fn observe(&mut self, m: &IntervalMeasurement) -> Result<f64> {
        let ebb = measure_ebb(m)?;
        self.push_rtt(m.interval_index, m.rtt_s);
        let saturated = self.is_saturated(m);
        let raises_max = self.btlbw().is_none_or(|bw| ebb >= bw);
        if saturated || raises_max {
            self.push_bandwidth(m.interval_index, ebb);
        }
        Ok(ebb)
    }

    /// Whether the interval queued at the bottleneck (or lost data), i.e.
    /// its EBB reflects the link rather than the sender.
    pub fn is_saturated(&self, m: &IntervalMeasurement) -> bool {
        if m.loss {
            return true;
        }
        match self.rtprop() {
            Some(rt) => m.rtt_s > rt * (1.0 + self.cfg.saturation_tolerance),
            None => false,
        }
    }

    /// RTT inflated past `rtt_inflation * RTprop`, or loss reported.
    pub fn congestion_detected(&self, m: &IntervalMeasurement) -> bool {
        if m.loss {
            return true;
        }
        match self.rtprop() {
            Some(rt) => m.rtt_s > self.cfg.rtt_inflation * rt,
            None => false,
        }
    }

    pub fn startup_step(&mut self, congestion_seen: bool) {
        debug_assert_eq!(self.phase, Phase::Startup);
        if congestion_seen {
            self.phase = Phase::NetSense;
        } else {
            self.ratio = (self.ratio + self.cfg.beta1).min(1.0);
        }
    }

    /// Multiplicative decrease above `bdp_fraction * BDP`, additive increase
    /// otherwise.
    pub fn adjust_ratio(&mut self, data_size_bits: f64) -> Result<()> {
        let bdp = self.compute_bdp()?;
        if data_size_bits > self.cfg.bdp_fraction * bdp {
            self.ratio = (self.ratio * self.cfg.alpha).max(self.cfg.ratio_floor);
        } else {
            self.ratio = (self.ratio + self.cfg.beta2).min(1.0);
        }
        Ok(())
    }

    /// One full control step: ingest the finished interval, then move the
    /// ratio. `bits_at_ratio` predicts the bottleneck volume a round sent at
    /// a given ratio would carry.
    pub fn on_interval(
        &mut self,
        m: &IntervalMeasurement,
        bits_at_ratio: impl Fn(f64) -> f64,
    ) -> Result<ControlSnapshot> {
        let ebb = self.observe(m)?;
        let congestion = self.congestion_detected(m);
        match self.phase {
            Phase::Startup => self.startup_step(congestion),
            Phase::NetSense => self.adjust_ratio(bits_at_ratio(self.ratio))?,
        }
        Ok(self.snapshot(ebb, congestion))
    }

    pub fn snapshot(&self, ebb: f64, congestion: bool) -> ControlSnapshot {
        let btlbw = self.btlbw().unwrap_or(0.0);
        let rtprop = self.rtprop().unwrap_or(0.0);
        ControlSnapshot {
            ebb,
            btlbw,
            rtprop,
            bdp: btlbw * rtprop,
            ratio: self.ratio,
            phase: self.phase,
            congestion,
        }
    }

    fn push_rtt(&mut self, index: u64, rtt: f64) {
        push_windowed(&mut self.rtprop_window, self.cfg.window, index, rtt);
    }

    fn push_bandwidth(&mut self, index: u64, ebb: f64) {
        push_windowed(&mut self.btlbw_window, self.cfg.window, index, ebb);
    }
}

fn push_windowed(window: &mut VecDeque<(u64, f64)>, len: usize, index: u64, value: f64) {
    window.push_back((index, value));
    let oldest_kept = index.saturating_add(1).saturating_sub(len as u64);
    while window.front().is_some_and(|(i, _)| *i < oldest_kept) {
        window.pop_front();
    }
    while window.len() > len {
        window.pop_front();
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn ctl() -> ControllerState {
        ControllerState::new(ControllerConfig::default()).unwrap()
    }

    fn netsense_with(btlbw: f64, rtprop: f64) -> ControllerState {
        let mut c = ctl();
        c.update_estimates(&IntervalMeasurement::new(0, btlbw * rtprop, rtprop)).unwrap();
        c.set_phase(Phase::NetSense);
        c
    }

    #[test]
    fn ebb_is_size_over_rtt() {
        let m = IntervalMeasurement::new(0, 1e6, 0.01);
        assert_eq!(measure_ebb(&m).unwrap(), 1e8);
        // 0.9 * BDP sent in exactly RTprop gives 0.9 * BtlBw
        let (bw, rt) = (2e8, 0.004);
        let m = IntervalMeasurement::new(0, 0.9 * bw * rt, rt);
        assert!((measure_ebb(&m).unwrap() - 0.9 * bw).abs() < 1e-6);
        assert!(measure_ebb(&IntervalMeasurement::new(0, 1.0, 0.0)).is_err());
        assert!(measure_ebb(&IntervalMeasurement::new(0, 1.0, -1.0)).is_err());
    }

    #[test]
    fn ebb_matches_division_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..100 {
            let size: f64 = rng.random_range(1.0..1e9);
            let rtt: f64 = rng.random_range(1e-5..1.0);
            let m = IntervalMeasurement::new(0, size, rtt);
            assert_eq!(measure_ebb(&m).unwrap(), size / rtt);
        }
    }

    #[test]
    fn singleton_window() {
        let mut c = ctl();
        c.update_estimates(&IntervalMeasurement::new(0, 1e6, 0.01)).unwrap();
        assert_eq!(c.btlbw(), Some(1e8));
        assert_eq!(c.rtprop(), Some(0.01));
    }

    #[test]
    fn btlbw_is_window_max() {
        let mut c = ctl();
        for (i, ebb) in [5.0, 9.0, 7.0].into_iter().enumerate() {
            c.update_estimates(&IntervalMeasurement::new(i as u64, ebb, 1.0)).unwrap();
        }
        assert_eq!(c.btlbw(), Some(9.0));
    }

    #[test]
    fn sliding_window_replay() {
        let mut c = ctl();
        let mut history = Vec::new();
        for i in 0..15u64 {
            let ebb = if i < 8 { 1e9 } else { 2e8 };
            let rtt = 0.004 + 0.0001 * i as f64;
            c.update_estimates(&IntervalMeasurement::new(i, ebb * rtt, rtt)).unwrap();
            history.push((ebb * rtt / rtt, rtt));
            let lo = history.len().saturating_sub(10);
            let max = history[lo..].iter().map(|h| h.0).fold(f64::MIN, f64::max);
            let min = history[lo..].iter().map(|h| h.1).fold(f64::MAX, f64::min);
            assert_eq!(c.btlbw(), Some(max));
            assert_eq!(c.rtprop(), Some(min));
            assert!(c.btlbw_window().count() <= 10);
        }
        // the drop at interval 8 has fully aged in by interval 17; at 14 the
        // window spans 5..=14 and still includes 1 Gb/s samples
        assert!((c.btlbw().unwrap() - 1e9).abs() < 1e-3);
        for i in 15..18u64 {
            c.update_estimates(&IntervalMeasurement::new(i, 2e8 * 0.004, 0.004)).unwrap();
        }
        assert!((c.btlbw().unwrap() - 2e8).abs() < 1e-3);
    }

    #[test]
    fn bdp_examples() {
        assert!(matches!(ctl().compute_bdp(), Err(Error::NotReady)));
        let c = netsense_with(1e8, 0.005);
        assert!((c.compute_bdp().unwrap() - 5e5).abs() < 1e-6);
        let c = netsense_with(2e8, 0.01);
        assert!((c.compute_bdp().unwrap() - 2e6).abs() < 1e-6);
    }

    #[test]
    fn bdp_matches_window_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut c = ctl();
        let mut ebbs = Vec::new();
        let mut rtts = Vec::new();
        for i in 0..40u64 {
            let size = rng.random_range(1e3..1e7);
            let rtt = rng.random_range(1e-3..1e-1);
            c.update_estimates(&IntervalMeasurement::new(i, size, rtt)).unwrap();
            ebbs.push(size / rtt);
            rtts.push(rtt);
            let lo = ebbs.len().saturating_sub(10);
            let bw = ebbs[lo..].iter().cloned().fold(f64::MIN, f64::max);
            let rt = rtts[lo..].iter().cloned().fold(f64::MAX, f64::min);
            assert_eq!(c.compute_bdp().unwrap(), bw * rt);
        }
    }

    #[test]
    fn startup_ramp_and_exit() {
        let mut c = ctl();
        c.startup_step(false);
        assert!((c.ratio() - 0.06).abs() < 1e-15);
        c.set_ratio(0.98);
        c.startup_step(false);
        assert_eq!(c.ratio(), 1.0);
        c.set_ratio(0.3);
        c.startup_step(true);
        assert_eq!(c.phase(), Phase::NetSense);
        assert_eq!(c.ratio(), 0.3);
    }

    #[test]
    fn adjust_ratio_branches() {
        // BDP = 1e6 bits
        let mut c = netsense_with(1e8, 0.01);
        c.set_ratio(0.1);
        c.adjust_ratio(0.95e6).unwrap();
        assert_eq!(c.ratio(), 0.05);

        c.set_ratio(0.008);
        c.adjust_ratio(0.95e6).unwrap();
        assert_eq!(c.ratio(), 0.005);

        c.set_ratio(0.995);
        c.adjust_ratio(0.5e6).unwrap();
        assert_eq!(c.ratio(), 1.0);

        // exactly at the threshold is the additive branch
        c.set_ratio(0.2);
        c.adjust_ratio(0.9e6).unwrap();
        assert!((c.ratio() - 0.21).abs() < 1e-15);
    }

    #[test]
    fn adjust_requires_estimates() {
        let mut c = ctl();
        c.set_phase(Phase::NetSense);
        assert!(matches!(c.adjust_ratio(1.0), Err(Error::NotReady)));
    }

    #[test]
    fn congestion_detection() {
        let c = netsense_with(1e8, 0.004);
        assert!(!c.congestion_detected(&IntervalMeasurement::new(1, 1.0, 0.004)));
        assert!(c.congestion_detected(&IntervalMeasurement::new(1, 1.0, 0.008)));
        assert!(!c.congestion_detected(&IntervalMeasurement::new(1, 1.0, 0.005)));
        assert!(c.congestion_detected(&IntervalMeasurement::new(1, 1.0, 0.004).with_loss(true)));
    }

    #[test]
    fn app_limited_samples_do_not_lower_estimate() {
        let mut c = ctl();
        // saturated sample at 1 Gb/s
        c.observe(&IntervalMeasurement::new(0, 4e6, 0.004)).unwrap();
        for i in 1..40 {
            c.observe(&IntervalMeasurement::new(i, 1e6, 0.004)).unwrap();
        }
        assert!((c.btlbw().unwrap() - 1e9).abs() < 1e-3);
        // an inflated RTT marks the sample saturated; old entries age out
        c.observe(&IntervalMeasurement::new(40, 2e6, 0.008)).unwrap();
        assert_eq!(c.btlbw(), Some(2.5e8));
    }

    #[test]
    fn loss_marks_sample_saturated() {
        let mut c = netsense_with(1e9, 0.004);
        c.observe(&IntervalMeasurement::new(20, 1e5, 0.004).with_loss(true)).unwrap();
        assert_eq!(c.btlbw(), Some(1e5 / 0.004));
    }

    #[test]
    fn sawtooth_recovery_needs_many_increments() {
        let mut c = netsense_with(1e8, 0.01);
        c.set_ratio(0.4);
        c.adjust_ratio(2e6).unwrap();
        assert_eq!(c.ratio(), 0.2);
        let mut steps = 0;
        while c.ratio() < 0.4 - 1e-9 {
            c.adjust_ratio(0.0).unwrap();
            steps += 1;
        }
        assert_eq!(steps, (0.2f64 / 0.01).ceil() as usize);
    }

    proptest::proptest! {
        #[test]
        fn ratio_stays_in_bounds(ops in proptest::collection::vec((proptest::bool::ANY, 0.0f64..4e6), 1..300)) {
            let mut c = netsense_with(1e8, 0.01);
            for (startup, size) in ops {
                if startup {
                    c.set_phase(Phase::Startup);
                    c.startup_step(size > 2e6);
                    c.set_phase(Phase::NetSense);
                } else {
                    c.adjust_ratio(size).unwrap();
                }
                proptest::prop_assert!(c.ratio() >= 0.005 && c.ratio() <= 1.0);
            }
        }
    }
}
