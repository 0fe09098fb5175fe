//! Run-level metrics computed from record streams.

use super::record::ExperimentRecord;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Target {
    /// Accuracy at or above this value.
    Accuracy(f64),
    /// Loss at or below this value.
    Loss(f64),
}

impl Target {
    pub fn met(&self, r: &ExperimentRecord) -> bool {
        match *self {
            Target::Accuracy(a) => r.accuracy >= a,
            Target::Loss(l) => r.loss <= l,
        }
    }
}

/// Simulated time of the first row meeting `target`, if any.
pub fn compute_tta(records: &[ExperimentRecord], target: Target) -> Option<f64> {
    records.iter().find(|r| target.met(r)).map(|r| r.sim_time)
}

/// Step number of the first row meeting `target`, if any.
pub fn steps_to_target(records: &[ExperimentRecord], target: Target) -> Option<u64> {
    records.iter().find(|r| target.met(r)).map(|r| r.step)
}

/// Sliding mean of per-step samples/sec over `window` rows, as
/// `(sim_time of the window's last row, mean)`. Starts at the first full
/// window.
pub fn compute_throughput(records: &[ExperimentRecord], window: usize) -> Vec<(f64, f64)> {
    assert!(window > 0, "throughput window must be positive");
    if records.len() < window {
        return Vec::new();
    }
    let mut out = Vec::with_capacity(records.len() - window + 1);
    let mut sum: f64 = records[..window].iter().map(|r| r.samples_per_sec).sum();
    out.push((records[window - 1].sim_time, sum / window as f64));
    for i in window..records.len() {
        sum += records[i].samples_per_sec - records[i - window].samples_per_sec;
        out.push((records[i].sim_time, sum / window as f64));
    }
    out
}

/// Samples processed per step, recovered from the first row.
pub fn samples_per_step(records: &[ExperimentRecord]) -> Option<f64> {
    records.first().map(|r| (r.samples_per_sec * r.sim_time).round())
}

/// `batch * N / mean step time` over the whole run.
pub fn mean_throughput(records: &[ExperimentRecord]) -> Option<f64> {
    let last = records.last()?;
    Some(samples_per_step(records)? * records.len() as f64 / last.sim_time)
}

/// `batch * N / mean step time` over rows after the first `skip`.
pub fn steady_throughput(records: &[ExperimentRecord], skip: usize) -> Option<f64> {
    if records.len() <= skip {
        return None;
    }
    let start = if skip == 0 { 0.0 } else { records[skip - 1].sim_time };
    let span = records.last()?.sim_time - start;
    Some(samples_per_step(records)? * (records.len() - skip) as f64 / span)
}

/// First time accuracy reaches `target - band` and holds at or above it for
/// `count` consecutive evaluations.
pub fn convergence_time(records: &[ExperimentRecord], target: f64, band: f64, count: usize) -> Option<f64> {
    let evals: Vec<&ExperimentRecord> = records.iter().filter(|r| r.evaluated).collect();
    let mut run = 0usize;
    let mut start = None;
    for r in evals {
        if r.accuracy >= target - band {
            if run == 0 {
                start = Some(r.sim_time);
            }
            run += 1;
            if run >= count {
                return start;
            }
        } else {
            run = 0;
        }
    }
    None
}

/// Time of the best evaluated accuracy (earliest on ties).
pub fn peak_time(records: &[ExperimentRecord]) -> Option<f64> {
    let mut best: Option<&ExperimentRecord> = None;
    for r in records.iter().filter(|r| r.evaluated) {
        if best.is_none_or(|b| r.accuracy > b.accuracy) {
            best = Some(r);
        }
    }
    best.map(|r| r.sim_time)
}

/// Last row at or before `t`.
pub fn row_at(records: &[ExperimentRecord], t: f64) -> Option<&ExperimentRecord> {
    records.iter().take_while(|r| r.sim_time <= t).last()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trainer::StrategyKind;

    fn rows(step_times: &[f64], accs: &[f64], bn: f64) -> Vec<ExperimentRecord> {
        let mut t = 0.0;
        step_times
            .iter()
            .zip(accs)
            .enumerate()
            .map(|(i, (dt, a))| {
                t += dt;
                ExperimentRecord {
                    sim_time: t,
                    step: i as u64 + 1,
                    strategy: StrategyKind::AllreduceDense,
                    ratio: 1.0,
                    data_size: 1.0,
                    rtt: *dt,
                    ebb: 1.0,
                    btlbw: 1.0,
                    rtprop: 1.0,
                    bdp: 1.0,
                    capacity_bps: 1.0,
                    loss: 1.0 - a,
                    accuracy: *a,
                    evaluated: true,
                    samples_per_sec: bn / dt,
                    loss_event: false,
                }
            })
            .collect()
    }

    #[test]
    fn tta_examples() {
        let accs: Vec<f64> = (0..50).map(|i| i as f64 / 50.0).collect();
        let r = rows(&[0.1; 50], &accs, 256.0);
        assert_eq!(compute_tta(&r, Target::Accuracy(-1.0)), Some(r[0].sim_time));
        assert_eq!(compute_tta(&r, Target::Accuracy(2.0)), None);
        // linear scan oracle
        let target = 0.5;
        let expect = r.iter().position(|x| x.accuracy >= target).map(|i| r[i].sim_time);
        assert_eq!(compute_tta(&r, Target::Accuracy(target)), expect);
        assert_eq!(expect, Some(r[25].sim_time));
        assert_eq!(steps_to_target(&r, Target::Loss(0.5)), Some(26));
    }

    #[test]
    fn throughput_constant() {
        let r = rows(&[0.2; 30], &[0.0; 30], 256.0);
        let s = compute_throughput(&r, 5);
        assert_eq!(s.len(), 26);
        assert_eq!(s[0].0, r[4].sim_time);
        for (_, v) in s {
            assert!((v - 1280.0).abs() < 1e-9);
        }
        assert!((mean_throughput(&r).unwrap() - 1280.0).abs() < 1e-9);
    }

    #[test]
    fn throughput_halves_after_window_flush() {
        let mut dts = vec![0.1; 20];
        dts.extend(vec![0.2; 20]);
        let r = rows(&dts, &[0.0; 40], 100.0);
        let w = 4;
        let s = compute_throughput(&r, w);
        // windowed-mean oracle
        for (i, (_, v)) in s.iter().enumerate() {
            let mean: f64 = r[i..i + w].iter().map(|x| x.samples_per_sec).sum::<f64>() / w as f64;
            assert!((v - mean).abs() < 1e-9);
        }
        assert!((s[0].1 - 1000.0).abs() < 1e-9);
        assert!((s.last().unwrap().1 - 500.0).abs() < 1e-9);
        assert!((steady_throughput(&r, 20).unwrap() - 500.0).abs() < 1e-9);
    }

    #[test]
    fn throughput_empty_until_full_window() {
        let r = rows(&[0.1; 3], &[0.0; 3], 1.0);
        assert!(compute_throughput(&r, 4).is_empty());
    }

    #[test]
    fn convergence_requires_sustained_band() {
        let mut accs = vec![0.5; 10];
        accs.extend(vec![0.8; 5]);
        accs.push(0.7);
        accs.extend(vec![0.801; 25]);
        let r = rows(&[1.0; 41], &accs, 1.0);
        assert_eq!(convergence_time(&r, 0.8, 0.005, 20), Some(r[16].sim_time));
        assert_eq!(convergence_time(&r, 0.8, 0.005, 30), None);
    }

    #[test]
    fn convergence_counts_overshoot_as_settled() {
        let mut accs = vec![0.5; 3];
        accs.extend(vec![0.796, 0.9, 1.0, 1.0]);
        let r = rows(&[1.0; 7], &accs, 1.0);
        assert_eq!(convergence_time(&r, 0.8, 0.005, 4), Some(r[3].sim_time));
        assert_eq!(convergence_time(&r, 0.8, 0.001, 4), None);
    }

    #[test]
    fn row_at_and_peak() {
        let r = rows(&[1.0; 5], &[0.1, 0.4, 0.3, 0.4, 0.2], 1.0);
        assert_eq!(peak_time(&r), Some(2.0));
        assert_eq!(row_at(&r, 3.5).unwrap().step, 3);
        assert!(row_at(&r, 0.5).is_none());
    }

    proptest::proptest! {
        #[test]
        fn constant_step_time_gives_constant_throughput(
            dt in 1e-4f64..1.0,
            n in 1usize..60,
            window in 1usize..20,
        ) {
            let r = rows(&vec![dt; n], &vec![0.5; n], 256.0);
            let series = compute_throughput(&r, window);
            proptest::prop_assert_eq!(series.len(), (n + 1).saturating_sub(window));
            for (_, v) in series {
                proptest::prop_assert!((v - 256.0 / dt).abs() <= 1e-9 * v);
            }
        }
    }
}
