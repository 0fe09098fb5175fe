use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Bottleneck bandwidth over time, as written in experiment configs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum BandwidthSchedule {
    /// Constant capacity.
    Static { level_bps: f64 },
    /// Staircase from `start_bps` down to `end_bps`, one `step_bps` every
    /// `dwell_s` seconds.
    Degrading {
        start_bps: f64,
        end_bps: f64,
        step_bps: f64,
        dwell_s: f64,
    },
    /// Constant capacity shared with a competing flow that is off for `off_s`
    /// seconds, then on at `cross_rate_bps` for `on_s` seconds, repeating.
    Fluctuating {
        base_bps: f64,
        cross_rate_bps: f64,
        on_s: f64,
        off_s: f64,
    },
}

impl BandwidthSchedule {
    pub fn label(&self) -> String {
        match self {
            BandwidthSchedule::Static { level_bps } => format!("static-{}mbps", fmt_mbps(*level_bps)),
            BandwidthSchedule::Degrading { start_bps, end_bps, .. } => {
                format!("degrading-{}to{}mbps", fmt_mbps(*start_bps), fmt_mbps(*end_bps))
            }
            BandwidthSchedule::Fluctuating { base_bps, cross_rate_bps, .. } => format!(
                "fluctuating-{}mbps-x{}mbps",
                fmt_mbps(*base_bps),
                fmt_mbps(*cross_rate_bps)
            ),
        }
    }

    /// Capacity at time zero.
    pub fn initial_bps(&self) -> f64 {
        match self {
            BandwidthSchedule::Static { level_bps } => *level_bps,
            BandwidthSchedule::Degrading { start_bps, .. } => *start_bps,
            BandwidthSchedule::Fluctuating { base_bps, .. } => *base_bps,
        }
    }
}

fn fmt_mbps(bps: f64) -> String {
    let m = bps / 1e6;
    if m.fract() == 0.0 {
        format!("{m:.0}")
    } else {
        format!("{m}")
    }
}

/// Evaluable capacity and cross-traffic functions of simulated time.
#[derive(Debug, Clone, PartialEq)]
pub struct Schedule {
    spec: BandwidthSchedule,
}

/// Validates a schedule spec and turns it into an evaluable schedule.
pub fn make_schedule(spec: &BandwidthSchedule) -> Result<Schedule> {
    let positive = |name: &str, v: f64| {
        if v > 0.0 && v.is_finite() {
            Ok(())
        } else {
            Err(Error::config(format!("schedule {name} must be positive and finite, got {v}")))
        }
    };
    match *spec {
        BandwidthSchedule::Static { level_bps } => positive("level_bps", level_bps)?,
        BandwidthSchedule::Degrading {
            start_bps,
            end_bps,
            step_bps,
            dwell_s,
        } => {
            positive("start_bps", start_bps)?;
            positive("end_bps", end_bps)?;
            positive("step_bps", step_bps)?;
            positive("dwell_s", dwell_s)?;
            if end_bps > start_bps {
                return Err(Error::config(format!(
                    "degrading schedule must not increase: end {end_bps} > start {start_bps}"
                )));
            }
        }
        BandwidthSchedule::Fluctuating {
            base_bps,
            cross_rate_bps,
            on_s,
            off_s,
        } => {
            positive("base_bps", base_bps)?;
            positive("on_s", on_s)?;
            positive("off_s", off_s)?;
            if !(0.0..base_bps).contains(&cross_rate_bps) {
                return Err(Error::config(format!(
                    "cross traffic rate must lie in [0, base), got {cross_rate_bps} for base {base_bps}"
                )));
            }
        }
    }
    Ok(Schedule { spec: spec.clone() })
}

impl Schedule {
    pub fn spec(&self) -> &BandwidthSchedule {
        &self.spec
    }

    /// Link capacity in bits per second at time `t`.
    pub fn capacity(&self, t: f64) -> f64 {
        match self.spec {
            BandwidthSchedule::Static { level_bps } => level_bps,
            BandwidthSchedule::Degrading {
                start_bps,
                end_bps,
                step_bps,
                dwell_s,
            } => {
                let n = (t.max(0.0) / dwell_s).floor();
                (start_bps - n * step_bps).max(end_bps)
            }
            BandwidthSchedule::Fluctuating { base_bps, .. } => base_bps,
        }
    }

    /// Rate taken by competing traffic at time `t`.
    pub fn cross_traffic(&self, t: f64) -> f64 {
        match self.spec {
            BandwidthSchedule::Fluctuating {
                cross_rate_bps,
                on_s,
                off_s,
                ..
            } => {
                let period = on_s + off_s;
                let phase = t.max(0.0) - (t.max(0.0) / period).floor() * period;
                if phase < off_s {
                    0.0
                } else {
                    cross_rate_bps
                }
            }
            _ => 0.0,
        }
    }

    /// Rate left for the training traffic.
    pub fn service_rate(&self, t: f64) -> f64 {
        (self.capacity(t) - self.cross_traffic(t)).max(0.0)
    }

    /// First time strictly after `t` at which the service rate may change.
    pub fn next_change(&self, t: f64) -> Option<f64> {
        match self.spec {
            BandwidthSchedule::Static { .. } => None,
            BandwidthSchedule::Degrading { end_bps, dwell_s, .. } => {
                if self.capacity(t) <= end_bps {
                    return None;
                }
                let mut n = (t.max(0.0) / dwell_s).floor() + 1.0;
                while n * dwell_s <= t {
                    n += 1.0;
                }
                Some(n * dwell_s)
            }
            BandwidthSchedule::Fluctuating { on_s, off_s, .. } => {
                let period = on_s + off_s;
                let start = (t.max(0.0) / period).floor() * period;
                [start + off_s, start + period, start + period + off_s]
                    .into_iter()
                    .find(|b| *b > t)
            }
        }
    }

    /// Distinct capacity levels of a degrading staircase, highest first.
    pub fn levels(&self) -> Vec<f64> {
        match self.spec {
            BandwidthSchedule::Degrading {
                start_bps,
                end_bps,
                step_bps,
                ..
            } => {
                let mut out = Vec::new();
                let mut n = 0.0;
                loop {
                    let level = (start_bps - n * step_bps).max(end_bps);
                    out.push(level);
                    if level <= end_bps {
                        break;
                    }
                    n += 1.0;
                }
                out
            }
            _ => vec![self.capacity(0.0)],
        }
    }

    /// Service-rate integral over `[from, to]`, in bits.
    pub fn integrate(&self, from: f64, to: f64) -> f64 {
        let mut t = from;
        let mut total = 0.0;
        while t < to {
            let seg_end = self.next_change(t).map_or(to, |c| c.min(to));
            total += self.service_rate(t) * (seg_end - t);
            t = seg_end;
        }
        total
    }

    /// Time needed from `from` to serve `bits`, piecewise over the schedule.
    pub fn drain_time(&self, bits: f64, from: f64) -> f64 {
        let mut remaining = bits;
        let mut t = from;
        while remaining > 0.0 {
            let rate = self.service_rate(t);
            match self.next_change(t) {
                Some(end) => {
                    let available = rate * (end - t);
                    if available >= remaining {
                        return t + remaining / rate - from;
                    }
                    remaining -= available;
                    t = end;
                }
                None => return t + remaining / rate - from,
            }
        }
        t - from
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn degrading() -> Schedule {
        make_schedule(&BandwidthSchedule::Degrading {
            start_bps: 2000e6,
            end_bps: 200e6,
            step_bps: 200e6,
            dwell_s: 1.0,
        })
        .unwrap()
    }

    #[test]
    fn static_is_constant() {
        let s = make_schedule(&BandwidthSchedule::Static { level_bps: 200e6 }).unwrap();
        for t in [0.0, 1.0, 1e6] {
            assert_eq!(s.capacity(t), 2e8);
            assert_eq!(s.service_rate(t), 2e8);
        }
        assert_eq!(s.next_change(5.0), None);
    }

    #[test]
    fn degrading_staircase_has_ten_levels() {
        let s = degrading();
        let levels = s.levels();
        assert_eq!(levels.len(), 10);
        assert_eq!(levels[0], 2000e6);
        assert_eq!(levels[9], 200e6);
        assert!(levels.windows(2).all(|w| w[0] > w[1]));
        let mut prev = f64::INFINITY;
        for i in 0..300 {
            let c = s.capacity(i as f64 * 0.05);
            assert!(c <= prev);
            prev = c;
        }
        assert_eq!(s.capacity(0.999), 2000e6);
        assert_eq!(s.capacity(1.0), 1800e6);
        assert_eq!(s.capacity(100.0), 200e6);
        assert_eq!(s.next_change(100.0), None);
        assert_eq!(s.next_change(1.0), Some(2.0));
    }

    #[test]
    fn degrading_rejects_increase() {
        let err = make_schedule(&BandwidthSchedule::Degrading {
            start_bps: 200e6,
            end_bps: 2000e6,
            step_bps: 200e6,
            dwell_s: 1.0,
        });
        assert!(matches!(err, Err(Error::Config(_))));
    }

    #[test]
    fn fluctuating_half_duty_alternates() {
        let c = 1e9;
        let s = make_schedule(&BandwidthSchedule::Fluctuating {
            base_bps: c,
            cross_rate_bps: c / 2.0,
            on_s: 0.5,
            off_s: 0.5,
        })
        .unwrap();
        // oracle: off on [k, k+0.5), on on [k+0.5, k+1)
        for i in 0..40 {
            let t = i as f64 * 0.1 + 0.05;
            let expect = if t.fract() < 0.5 { c } else { c / 2.0 };
            assert_eq!(s.service_rate(t), expect, "t={t}");
        }
        assert_eq!(s.next_change(0.2), Some(0.5));
        assert_eq!(s.next_change(0.5), Some(1.0));
        assert!(make_schedule(&BandwidthSchedule::Fluctuating {
            base_bps: c,
            cross_rate_bps: c,
            on_s: 1.0,
            off_s: 1.0,
        })
        .is_err());
    }

    #[test]
    fn drain_crosses_step_boundary() {
        let s = degrading();
        // 1 Gbit from t=0.5: 0.5 s at 2000 Mb/s serves all of it.
        assert!((s.drain_time(1e9, 0.5) - 0.5).abs() < 1e-12);
        // 1.4 Gbit: 1.0 Gbit in the first half second, then 0.4 Gbit at
        // 1800 Mb/s.
        let expect = 0.5 + 0.4e9 / 1800e6;
        assert!((s.drain_time(1.4e9, 0.5) - expect).abs() < 1e-12);
        assert!((s.integrate(0.5, 0.5 + expect) - 1.4e9).abs() < 1e-3);
    }

    #[test]
    fn labels() {
        assert_eq!(BandwidthSchedule::Static { level_bps: 200e6 }.label(), "static-200mbps");
    }
}
