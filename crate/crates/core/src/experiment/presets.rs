use crate::netsim::{BandwidthSchedule, LinkConfig};
use crate::trainer::{TaskConfig, TrainingConfig};

use super::config::ExperimentConfig;

pub const PRESET_NAMES: [&str; 3] = ["static-bw", "degrading-bw", "fluctuating-bw"];

fn base(name: &str) -> ExperimentConfig {
    ExperimentConfig {
        name: name.into(),
        seed: 1,
        task: TaskConfig::Softmax {
            features: 600,
            classes: 20,
            train_samples: 4096,
            eval_samples: 1024,
            separation: 0.2,
            init_scale: 0.01,
        },
        training: TrainingConfig {
            workers: 8,
            batch: 32,
            lr: Some(0.5),
            steps: 400,
            compute_time_s: 0.00125,
            sparse_overhead_s: 0.00025,
            eval_every: 5,
            target_accuracy: Some(0.8),
            ..Default::default()
        },
        link: LinkConfig {
            prop_delay_s: 0.000125,
            ..Default::default()
        },
        ..Default::default()
    }
}

/// Built-in run matrices. Every preset fully determines a run given its seed.
pub fn preset(name: &str) -> Option<ExperimentConfig> {
    let mut cfg = base(name);
    match name {
        "static-bw" => {
            cfg.bandwidths = [200e6, 500e6, 800e6]
                .into_iter()
                .map(|level_bps| BandwidthSchedule::Static { level_bps })
                .collect();
        }
        "degrading-bw" => {
            cfg.bandwidths = vec![BandwidthSchedule::Degrading {
                start_bps: 2000e6,
                end_bps: 200e6,
                step_bps: 200e6,
                dwell_s: 0.2,
            }];
            cfg.training.steps = 100_000;
            cfg.training.time_budget_s = Some(2.0);
        }
        "fluctuating-bw" => {
            cfg.bandwidths = vec![BandwidthSchedule::Fluctuating {
                base_bps: 500e6,
                cross_rate_bps: 250e6,
                on_s: 0.25,
                off_s: 0.25,
            }];
            cfg.training.steps = 100_000;
            cfg.training.time_budget_s = Some(1.5);
        }
        _ => return None,
    }
    Some(cfg)
}
